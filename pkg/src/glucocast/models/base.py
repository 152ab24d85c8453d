"""Forecaster specifications and the shared fit/predict interface."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import ClassVar, Mapping, Sequence

import numpy as np

from ..series import LagFeature, SupervisedSet, Variable


class ColumnMismatchError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, violation: float | None = None):
        super().__init__(message)
        self.violation = violation


@dataclass(frozen=True)
class PersistenceSpec:
    kind: ClassVar[str] = "persistence"


@dataclass(frozen=True)
class RidgeSpec:
    kind: ClassVar[str] = "ridge"
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("ridge lambda must be non-negative")


@dataclass(frozen=True)
class ArimaSpec:
    """ARIMA order; ``None`` entries are chosen by AIC over the ``max_*`` grid."""

    kind: ClassVar[str] = "arima"
    p: int | None = None
    d: int | None = None
    q: int | None = None
    max_p: int = 3
    max_q: int = 3
    d_options: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        for name, v, hi in (("p", self.p, 5), ("q", self.q, 5), ("d", self.d, 2)):
            if v is not None and not 0 <= v <= hi:
                raise ValueError(f"{name} must lie in [0, {hi}]")
        if self.max_p > 5 or self.max_q > 5 or any(not 0 <= d <= 2 for d in self.d_options):
            raise ValueError("order grid exceeds p, q <= 5, d <= 2")


@dataclass(frozen=True)
class RFSpec:
    kind: ClassVar[str] = "rf"
    n_trees: int = 100
    mtry: int | None = None        # default ceil(p / 3)
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.n_trees < 1 or self.min_leaf < 1:
            raise ValueError("n_trees and min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")


@dataclass(frozen=True)
class SVRSpec:
    """epsilon-SVR with RBF kernel; ``epsilon`` is in standardised target units."""

    kind: ClassVar[str] = "svr"
    C: float = 10.0
    epsilon: float = 0.1
    gamma: float | None = None     # default 1 / n_features
    tol: float = 1e-3
    max_iter: int = 1_000_000
    cache_mb: float = 256.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")


SPEC_TYPES = {cls.kind: cls for cls in (PersistenceSpec, RidgeSpec, ArimaSpec, RFSpec, SVRSpec)}
ForecasterSpec = PersistenceSpec | RidgeSpec | ArimaSpec | RFSpec | SVRSpec


def _coerce(value: str, current):
    if value.lower() in ("none", ""):
        return None
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.split("/"))
    try:
        return int(value)
    except ValueError:
        return float(value)


def parse_spec(text: str) -> ForecasterSpec:
    """``"rf"`` or ``"rf:n_trees=50;min_leaf=3"`` -> spec instance."""
    kind, _, rest = text.strip().partition(":")
    try:
        cls = SPEC_TYPES[kind.strip()]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(SPEC_TYPES)}") from None
    spec = cls()
    if rest.strip():
        names = {f.name for f in fields(cls)}
        kw = {}
        for item in rest.split(";"):
            if not item.strip():
                continue
            k, _, v = item.partition("=")
            k = k.strip()
            if k not in names:
                raise ValueError(f"{kind} has no parameter {k!r}")
            kw[k] = _coerce(v.strip(), getattr(spec, k))
        spec = replace(spec, **kw)
    return spec


def spec_to_dict(spec) -> dict:
    d = {"kind": spec.kind}
    for f in fields(spec):
        v = getattr(spec, f.name)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    return d


def spec_from_dict(d: Mapping) -> ForecasterSpec:
    d = dict(d)
    cls = SPEC_TYPES[d.pop("kind")]
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
        return cls(mean, scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


@dataclass(frozen=True)
class Forecast:
    value: float
    target_time: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("forecast is not finite")


class RegressionModel:
    """A fitted model mapping a lag-feature row to glucose ``horizon_steps`` ahead."""

    spec: ForecasterSpec
    columns: tuple[LagFeature, ...]
    horizon_steps: int
    step_s: int

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _row(self, row) -> np.ndarray:
        if isinstance(row, Mapping):
            keys = set(row)
            if keys != set(self.columns):
                missing = [c.name for c in self.columns if c not in keys]
                extra = [str(c) for c in keys - set(self.columns)]
                raise ColumnMismatchError(f"row columns differ; missing {missing}, unexpected {extra}")
            return np.array([row[c] for c in self.columns], dtype=np.float64)
        x = np.asarray(row, dtype=np.float64).ravel()
        if x.size != len(self.columns):
            raise ColumnMismatchError(f"row has {x.size} values, model expects {len(self.columns)}")
        return x

    def predict_one(self, row) -> float:
        return float(self.predict_batch(self._row(row)[None, :])[0])


def check_columns(model: RegressionModel, data: SupervisedSet) -> None:
    if tuple(data.columns) != tuple(model.columns):
        raise ColumnMismatchError("supervised set columns differ from the model's")


def glucose_lag1_index(columns: Sequence[LagFeature]) -> int:
    try:
        return list(columns).index(LagFeature(Variable.GLUCOSE, 1))
    except ValueError:
        raise ColumnMismatchError("persistence needs the glucose[t-1] column") from None
