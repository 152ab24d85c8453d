"""Sequential input selection over lagged inputs (SISAL).

Backward elimination driven by resampled linear models: at every step the
active inputs are refitted by standardised ridge regression on ``B`` random
train/validation splits; each input is scored by

    s_j = |median(w_j)| / (q_high(w_j) - q_low(w_j))

over its ``B`` weights, and the lowest-scoring input is removed. The
finally selected set is the sparsest step whose mean validation MSE is
within ``(1 + sparsity_tolerance)`` of the best step.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _seeds
from .onboard import ONBOARD_OF, onboard_features
from .series import (LagFeature, MissingVariableError, PatientRecord, SupervisedSet, Variable, align, embed,
                     interpolate_gaps)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    resamples: int = 100
    train_fraction: float = 0.7
    q_low: float = 0.165
    q_high: float = 0.835
    ridge_lambda: float = 1e-3
    sparsity_tolerance: float = 0.05
    seed: int = 0
    max_lag_steps: dict = field(default_factory=dict)  # Variable -> lags, used by candidate builders
    workers: int = 1

    def __post_init__(self):
        if self.resamples < 10:
            raise ValueError("at least 10 resamples are required")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not 0 <= self.q_low < self.q_high <= 1:
            raise ValueError("need 0 <= q_low < q_high <= 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be non-negative")


@dataclass(frozen=True)
class WeightDistribution:
    features: tuple[LagFeature, ...]
    weights: np.ndarray      # (B, k), raw feature units
    val_mse: np.ndarray      # (B,)

    def stats(self, q_low: float, q_high: float):
        med = np.median(self.weights, axis=0)
        width = np.quantile(self.weights, q_high, axis=0) - np.quantile(self.weights, q_low, axis=0)
        return med, width


def score(median: np.ndarray, width: np.ndarray) -> np.ndarray:
    """``|median| / width``; a zero-width distribution scores inf, or 0 if its median is 0 too."""
    a = np.abs(median)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(width > 0, a / np.where(width > 0, width, 1.0), np.where(a > 0, np.inf, 0.0))
    return s


class _Moments:
    """Globally centred data plus its Gram matrix, reused across resamples."""

    def __init__(self, data: SupervisedSet):
        self.X = data.X - data.X.mean(axis=0)
        self.y = data.y - data.y.mean()
        self.XX = self.X.T @ self.X
        self.Xy = self.X.T @ self.y
        self.n = data.X.shape[0]


def _one_resample(mom: _Moments, active: np.ndarray, config: SelectionConfig, step: int, b: int):
    n = mom.n
    n_train = int(round(config.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = _seeds.rng(config.seed, step, b).permutation(n)
    val = np.sort(perm[n_train:])
    Xv = mom.X[np.ix_(val, active)]
    yv = mom.y[val]
    nt = n - val.size
    # train moments = global (centred, so zero sums) minus validation part
    mu = -Xv.sum(axis=0) / nt
    ybar = -yv.sum() / nt
    C = mom.XX[np.ix_(active, active)] - Xv.T @ Xv - nt * np.outer(mu, mu)
    cy = mom.Xy[active] - Xv.T @ yv - nt * mu * ybar
    var = np.diag(C) / nt
    sd = np.sqrt(np.maximum(var, 0.0))
    sd = np.where(sd > 1e-12 * (1.0 + np.abs(mu)), sd, 1.0)
    A = C / np.outer(sd, sd)
    rhs = cy / sd
    k = active.size
    if config.ridge_lambda == 0:
        if np.linalg.matrix_rank(A) < k:
            raise DegenerateInputError("standardised design is rank deficient; use ridge_lambda > 0")
    else:
        A = A + config.ridge_lambda * np.eye(k)
    w_raw = np.linalg.solve(A, rhs) / sd
    resid = yv - ybar - (Xv - mu) @ w_raw
    return w_raw, float(resid @ resid) / resid.size


def resampled_weights(data: SupervisedSet, active: Sequence[LagFeature], config: SelectionConfig,
                      step: int = 0, _moments: _Moments | None = None) -> WeightDistribution:
    """Ridge weights of the active inputs over ``config.resamples`` random splits.

    Weights are reported in raw feature units. Split ``b`` of elimination step
    ``step`` is seeded from ``(config.seed, step, b)``.
    """
    active = list(active)
    if not active:
        raise DegenerateInputError("no active inputs")
    if len(data) <= len(active) + 1:
        raise DegenerateInputError(f"{len(data)} rows cannot support {len(active)} inputs")
    mom = _moments or _Moments(data)
    idx = np.array([data.column_index(f) for f in active])
    run = lambda b: _one_resample(mom, idx, config, step, b)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            out = list(pool.map(run, range(config.resamples)))
    else:
        out = [run(b) for b in range(config.resamples)]
    W = np.array([w for w, _ in out])
    mse = np.array([m for _, m in out])
    return WeightDistribution(tuple(active), W, mse)


@dataclass
class SelectionStep:
    index: int
    active: tuple[LagFeature, ...]
    median: np.ndarray
    width: np.ndarray
    scores: np.ndarray
    val_mse: float
    removed: LagFeature | None


@dataclass
class SelectionResult:
    candidates: tuple[LagFeature, ...]
    removal_order: list[LagFeature]
    selected_set: list[LagFeature]
    validation_curve: list[float]
    weight_stats: dict[LagFeature, tuple[float, float]]
    variable_ranking: list[Variable]
    influence_duration_s: dict[Variable, int]
    steps: list[SelectionStep]
    step_s: int
    selected_step: int

    def to_jsonl(self, path) -> None:
        """One JSON record per elimination step."""
        with Path(path).open("w") as fh:
            for st in self.steps:
                rec = {
                    "step": st.index,
                    "n_active": len(st.active),
                    "val_mse": st.val_mse,
                    "removed": st.removed.name if st.removed else None,
                    "selected": st.index == self.selected_step,
                    "scores": {f.name: float(s) if np.isfinite(s) else None for f, s in zip(st.active, st.scores)},
                    "median": {f.name: float(m) for f, m in zip(st.active, st.median)},
                    "width": {f.name: float(w) for f, w in zip(st.active, st.width)},
                }
                fh.write(json.dumps(rec) + "\n")

    def summary_rows(self) -> list[tuple[str, int, float]]:
        return [(v.value, rank, self.influence_duration_s.get(v, 0) / 60.0)
                for rank, v in enumerate(self.variable_ranking, start=1)]

    def to_summary_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variable", "rank", "influence_minutes"))
            for var, rank, minutes in self.summary_rows():
                w.writerow((var, rank, f"{minutes:g}"))


def _removal_key(feature: LagFeature, s: float):
    # lowest score first; ties remove the longer lag, then the alphabetically first variable
    return (s, -feature.lag_steps, feature.variable.value)


def sisal(data: SupervisedSet, config: SelectionConfig = SelectionConfig()) -> SelectionResult:
    candidates = tuple(data.columns)
    if len(data) <= len(candidates) + 1:
        raise DegenerateInputError(f"{len(data)} rows cannot support {len(candidates)} inputs")
    mom = _Moments(data)
    active = list(candidates)
    steps: list[SelectionStep] = []
    removal: list[LagFeature] = []
    last_stats: dict[LagFeature, tuple[float, float]] = {}
    while True:
        i = len(steps)
        dist = resampled_weights(data, active, config, step=i, _moments=mom)
        med, width = dist.stats(config.q_low, config.q_high)
        sc = score(med, width)
        for f, m, w in zip(active, med, width):
            last_stats[f] = (float(m), float(w))
        removed = None
        if len(active) > 1:
            j = min(range(len(active)), key=lambda k: _removal_key(active[k], sc[k]))
            removed = active[j]
        steps.append(SelectionStep(i, tuple(active), med, width, sc, float(dist.val_mse.mean()), removed))
        if removed is None:
            break
        removal.append(removed)
        active = active[:j] + active[j + 1:]

    curve = [st.val_mse for st in steps]
    best = min(curve)
    sel = max(i for i, v in enumerate(curve) if v <= (1 + config.sparsity_tolerance) * best)
    selected = list(steps[sel].active)

    variables = list(dict.fromkeys(c.variable for c in candidates))
    sel_step = steps[sel]
    max_score = {}
    for f, s in zip(sel_step.active, sel_step.scores):
        max_score[f.variable] = max(max_score.get(f.variable, -np.inf), s)
    last_removed = {}
    for pos, f in enumerate(removal):
        last_removed[f.variable] = pos
    retained = sorted(max_score, key=lambda v: (-max_score[v], variables.index(v)))
    dropped = sorted((v for v in variables if v not in max_score),
                     key=lambda v: (-last_removed.get(v, -1), variables.index(v)))
    ranking = retained + dropped

    res = SelectionResult(candidates, removal, selected, curve, last_stats, ranking, {}, steps,
                          data.step_s, sel)
    res.influence_duration_s = influence_durations(res, data.step_s)
    return res


def influence_durations(result: SelectionResult, step_s: int) -> dict[Variable, int]:
    """``step_s`` times the longest retained lag of each variable; 0 if none is retained."""
    variables = dict.fromkeys(c.variable for c in result.candidates)
    out = {v: 0 for v in variables}
    for f in result.selected_set:
        out[f.variable] = max(out.get(f.variable, 0), f.lag_steps * step_s)
    return out


def candidate_set(record: PatientRecord, variables: Sequence[Variable], step_s: int, horizon_min: int,
                  max_lag_steps: dict, kernels=None) -> SupervisedSet:
    """All lags ``1..max_lag_steps[v]`` of each variable, predicting glucose ``horizon_min`` ahead.

    Series are aggregated onto a ``step_s`` grid; on-board variables are
    computed from the record's full-resolution events. Glucose gaps up to 30
    minutes are interpolated.
    """
    if (horizon_min * 60) % step_s:
        raise ValueError(f"horizon {horizon_min} min is not a whole number of {step_s} s steps")
    raw = [v for v in variables if not v.derived and v != Variable.GLUCOSE]
    derived = [v for v in variables if v.derived]
    sources = {d: s for s, d in ONBOARD_OF.items()}
    missing = [v.value for v in raw if v not in record]
    missing += [f"{v.value} (needs {sources[v].value})" for v in derived if sources[v] not in record]
    if missing:
        raise MissingVariableError(f"{record.patient_id}: missing {', '.join(missing)}")
    aligned = align(record, step_s, variables=[Variable.GLUCOSE, *raw])
    aligned[Variable.GLUCOSE] = interpolate_gaps(aligned[Variable.GLUCOSE], max(1, 1800 // step_s))
    if derived:
        aligned.update(onboard_features(aligned, record.series, kernels))
    cols = [LagFeature(v, k) for v in variables for k in range(1, int(max_lag_steps[v]) + 1)]
    return embed(aligned, cols, horizon_min * 60 // step_s)
