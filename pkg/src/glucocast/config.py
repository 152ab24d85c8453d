"""Run configuration: plain-text ``key = value`` files with environment overrides.

Precedence, lowest first: built-in defaults, the ``--config`` file,
``GLUCOCAST_*`` environment variables, command-line flags. An environment
variable names a key by upper-casing it and writing ``.`` as ``__``, so
``eval.models`` is ``GLUCOCAST_EVAL__MODELS``. Unknown keys are errors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .evalbench import BenchConfig, EvalConfig, FEATURE_MODES
from .models import parse_spec
from .onboard import kernels_from_config
from .series import Variable
from .sisal import SelectionConfig

ENV_PREFIX = "GLUCOCAST_"

SELECT_VARIABLES = {
    "raw": (Variable.GLUCOSE, Variable.INSULIN_BOLUS, Variable.CARBS, Variable.EXERCISE,
            Variable.HEART_RATE, Variable.SLEEP, Variable.SCHEDULE),
    "onboard": (Variable.GLUCOSE, Variable.IOB, Variable.COB, Variable.EOB,
                Variable.HEART_RATE, Variable.SLEEP, Variable.SCHEDULE),
}

DEFAULTS: dict[str, str] = {
    "seed": "",
    "workers": "",
    "log_level": "info",
    "data_dir": "",
    "out_dir": "",
    "simulate.n_patients": "25",
    "simulate.days": "14",
    "simulate.scenario": "",
    "select.step_s": "900",
    "select.horizon_min": "15",
    "select.modes": "raw,onboard",
    "select.per_patient": "true",
    "select.resamples": "100",
    "select.train_fraction": "0.7",
    "select.q_low": "0.165",
    "select.q_high": "0.835",
    "select.ridge_lambda": "1e-3",
    "select.sparsity_tolerance": "0.05",
    "eval.models": "arima,rf,svr",
    "eval.steps": "300,600,900",
    "eval.histories": "3,6,12",
    "eval.horizons": "15,30,45,60",
    "eval.train_days": "10",
    "eval.test_days": "4",
    "eval.feature_mode": "univariate_glucose",
    "train.model": "rf",
    "train.step_s": "300",
    "train.history_h": "6",
    "train.horizon_min": "15",
    "bench.models": "rf,svr",
    "bench.sizes": "500,2000",
    "bench.repetitions": "21",
    "bench.warmup": "3",
    "bench.thread_cap": "1",
    "bench.step_s": "300",
    "bench.history_h": "6",
    "bench.horizon_min": "15",
}

# longest candidate lag per selection variable, minutes
for _v, _m in (("glucose", 240), ("insulin_bolus", 240), ("carbs", 240), ("exercise", 120),
               ("heart_rate", 120), ("sleep", 60), ("schedule", 60), ("iob", 240), ("cob", 240), ("eob", 120)):
    DEFAULTS[f"select.max_lag_min.{_v}"] = str(_m)
for _name in ("insulin", "carbs", "exercise"):
    for _field in ("shape", "duration_min", "peak_min"):
        DEFAULTS[f"kernel.{_name}.{_field}"] = ""


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if key not in DEFAULTS:
            raise ConfigError(f"environment variable {name} names unknown key {key!r}")
        out[key] = value
    return out


def resolve(config_path=None, environ=None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
    values = dict(DEFAULTS)
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update(env_overrides(environ))
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            values[k] = str(v)
    return RunConfig(values)


def _list(text: str, conv=str) -> tuple:
    return tuple(conv(x.strip()) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _number(text: str) -> int | float:
    f = float(text)
    return int(f) if f.is_integer() and "." not in text and "e" not in text.lower() else f


@dataclass(frozen=True)
class RunConfig:
    """Resolved key-value settings with typed views for each stage."""

    values: dict

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from None

    def kernels(self):
        try:
            return kernels_from_config({k: v for k, v in self.values.items() if k.startswith("kernel.") and v})
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def models(self, key: str) -> tuple:
        text = self.values[key]
        try:
            return tuple(parse_spec(s) for s in text.split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def selection(self, seed: int, workers: int = 1) -> SelectionConfig:
        step = self.get_int("select.step_s")
        lags = {}
        for mode in SELECT_VARIABLES.values():
            for v in mode:
                minutes = self.get_float(f"select.max_lag_min.{v.value}")
                lags[v] = max(1, int(minutes * 60 // step))
        try:
            return SelectionConfig(resamples=self.get_int("select.resamples"),
                                   train_fraction=self.get_float("select.train_fraction"),
                                   q_low=self.get_float("select.q_low"), q_high=self.get_float("select.q_high"),
                                   ridge_lambda=self.get_float("select.ridge_lambda"),
                                   sparsity_tolerance=self.get_float("select.sparsity_tolerance"),
                                   seed=seed, max_lag_steps=lags, workers=workers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def select_modes(self) -> tuple[str, ...]:
        modes = _list(self.values["select.modes"])
        for m in modes:
            if m not in SELECT_VARIABLES:
                raise ConfigError(f"select.modes: unknown mode {m!r}; expected raw and/or onboard")
        return modes

    def evaluation(self, seed: int, workers: int, models: tuple | None = None) -> EvalConfig:
        mode = self.values["eval.feature_mode"]
        if mode not in FEATURE_MODES:
            raise ConfigError(f"eval.feature_mode must be one of {FEATURE_MODES}")
        try:
            return EvalConfig(models=models or self.models("eval.models"),
                              step_s_options=_list(self.values["eval.steps"], int),
                              history_options=_list(self.values["eval.histories"], _number),
                              horizon_options=_list(self.values["eval.horizons"], int),
                              train_days=self.get_float("eval.train_days"),
                              test_days=self.get_float("eval.test_days"),
                              feature_mode=mode, seed=seed, workers=workers, kernels=self.kernels())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def bench(self) -> BenchConfig:
        try:
            return BenchConfig(self.get_int("bench.thread_cap"), self.get_int("bench.repetitions"),
                               self.get_int("bench.warmup"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def bench_sizes(self) -> tuple[int, ...]:
        return _list(self.values["bench.sizes"], int)
