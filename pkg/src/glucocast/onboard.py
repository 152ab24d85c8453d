"""On-board remnant features: insulin (IOB), carbs (COB) and exercise (EOB) on board.

Each event of magnitude ``d`` at time ``t_i`` contributes ``d * r(t - t_i)``
on board, where ``r`` is the remaining fraction of a kernel. Contributions of
separate events add up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .series import EventSeries, Grid, UniformSeries, Variable

SHAPES = ("bi_exponential", "linear_decay")

# source variable -> derived on-board variable
ONBOARD_OF = {
    Variable.INSULIN_BOLUS: Variable.IOB,
    Variable.CARBS: Variable.COB,
    Variable.EXERCISE: Variable.EOB,
}


@dataclass(frozen=True)
class Kernel:
    """Remaining-action curve.

    ``bi_exponential`` uses activity ``a(tau) ~ tau * exp(-tau / peak_s)``,
    truncated at ``duration_s`` and renormalised to unit mass;
    ``linear_decay`` has constant activity ``1 / duration_s``.
    """

    shape: str
    duration_s: float
    peak_s: float | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if self.shape == "bi_exponential":
            if self.peak_s is None or not 0 < self.peak_s < self.duration_s:
                raise ValueError("bi_exponential kernels need 0 < peak_s < duration_s")

    @property
    def _mass(self) -> float:
        # unnormalised activity integral over [0, duration]
        return _gamma2_cdf(self.duration_s / self.peak_s)


def _gamma2_cdf(x):
    """1 - exp(-x)(1 + x): integral of s*exp(-s) over [0, x]."""
    return -np.expm1(-x) - x * np.exp(-x)


#: defaults; durations and peaks in seconds
DEFAULT_KERNELS = {
    Variable.INSULIN_BOLUS: Kernel("bi_exponential", 5 * 3600, 75 * 60),
    Variable.CARBS: Kernel("bi_exponential", 3 * 3600, 45 * 60),
    Variable.EXERCISE: Kernel("linear_decay", 8 * 3600),
}


def remaining_fraction(kernel: Kernel, age_s):
    """Fraction of an event's action still to come ``age_s`` seconds after it."""
    age = np.asarray(age_s, dtype=np.float64)
    if np.any(age < 0) or np.any(np.isnan(age)):
        raise ValueError("age must be non-negative")
    if kernel.shape == "linear_decay":
        r = np.maximum(0.0, 1.0 - age / kernel.duration_s)
    else:
        tau = np.minimum(age, kernel.duration_s)
        r = 1.0 - _gamma2_cdf(tau / kernel.peak_s) / kernel._mass
        r = np.where(age >= kernel.duration_s, 0.0, np.clip(r, 0.0, 1.0))
    return float(r) if r.ndim == 0 else r


def activity_rate(kernel: Kernel, age_s):
    """Activity ``a = -dr/dtau`` in 1/s; zero at and beyond the duration."""
    age = np.asarray(age_s, dtype=np.float64)
    if np.any(age < 0):
        raise ValueError("age must be non-negative")
    inside = age < kernel.duration_s
    if kernel.shape == "linear_decay":
        a = np.where(inside, 1.0 / kernel.duration_s, 0.0)
    else:
        k = kernel.peak_s
        a = np.where(inside, age * np.exp(-age / k) / (k * k * kernel._mass), 0.0)
    return float(a) if a.ndim == 0 else a


def _grid_of(grid) -> Grid:
    if isinstance(grid, UniformSeries):
        return grid.grid
    if isinstance(grid, Grid):
        return grid
    return Grid(*grid)


def _superpose(events: EventSeries, grid: Grid, fn, chunk: int = 2048) -> np.ndarray:
    out = np.zeros(grid.n)
    if len(events) == 0 or grid.n == 0:
        return out
    t = grid.times.astype(np.float64)
    et = events.times.astype(np.float64)
    d = events.values
    # sum over events in their stored order so superposition is order-stable
    for lo in range(0, grid.n, chunk):
        tt = t[lo:lo + chunk, None]
        age = tt - et[None, :]
        past = age >= 0
        contrib = np.where(past, d[None, :] * fn(np.where(past, age, 0.0)), 0.0)
        out[lo:lo + chunk] = contrib.sum(axis=1)
    return out


def onboard(events: EventSeries, kernel: Kernel, grid, variable: Variable | None = None) -> UniformSeries:
    """Amount still on board at each grid time: ``sum_i d_i * r(t - t_i)`` for ``t_i <= t``."""
    g = _grid_of(grid)
    var = variable or ONBOARD_OF.get(events.variable, events.variable)
    values = _superpose(events, g, lambda age: remaining_fraction(kernel, age))
    return UniformSeries(var, g.start, g.step_s, values)


def activity(events: EventSeries, kernel: Kernel, grid) -> UniformSeries:
    """Current action intensity ``sum_i d_i * a(t - t_i)`` in source units per second."""
    g = _grid_of(grid)
    values = _superpose(events, g, lambda age: activity_rate(kernel, age))
    return UniformSeries(events.variable, g.start, g.step_s, values)


def exercise_events(series: UniformSeries) -> EventSeries:
    """Intensity samples as intensity*minute doses, the unit exercise-on-board is kept in."""
    return series.to_events(as_dose=True)


def onboard_features(aligned: Mapping[Variable, UniformSeries], record_series: Mapping[Variable, object],
                     kernels: Mapping[Variable, Kernel] | None = None) -> dict[Variable, UniformSeries]:
    """IOB/COB/EOB series on the grid of ``aligned`` glucose for each available source variable.

    Event sources are taken from ``record_series`` at full time resolution so
    that on-board amounts do not depend on the analysis grid.
    """
    kernels = {**DEFAULT_KERNELS, **(kernels or {})}
    grid = aligned[Variable.GLUCOSE].grid
    out = {}
    for src, derived in ONBOARD_OF.items():
        s = record_series.get(src)
        if s is None:
            continue
        ev = exercise_events(s) if isinstance(s, UniformSeries) else s
        out[derived] = onboard(ev, kernels[src], grid, variable=derived)
    return out


_CONFIG_NAMES = {"insulin": Variable.INSULIN_BOLUS, "carbs": Variable.CARBS, "exercise": Variable.EXERCISE}


def kernels_from_config(cfg: Mapping[str, str]) -> dict[Variable, Kernel]:
    """Build kernels from ``kernel.<name>.{shape,duration_min,peak_min}`` keys.

    Unspecified fields keep their defaults; unknown keys raise ``KeyError``.
    """
    fields: dict[Variable, dict] = {}
    for key, value in cfg.items():
        if not key.startswith("kernel."):
            continue
        parts = key.split(".")
        if len(parts) != 3 or parts[1] not in _CONFIG_NAMES or parts[2] not in ("shape", "duration_min", "peak_min"):
            raise KeyError(f"unknown kernel key {key!r}")
        fields.setdefault(_CONFIG_NAMES[parts[1]], {})[parts[2]] = value
    out = dict(DEFAULT_KERNELS)
    for var, f in fields.items():
        base = DEFAULT_KERNELS[var]
        shape = f.get("shape", base.shape)
        duration = float(f["duration_min"]) * 60 if "duration_min" in f else base.duration_s
        peak = float(f["peak_min"]) * 60 if "peak_min" in f else base.peak_s
        if shape == "linear_decay":
            peak = None
        elif peak is None or not math.isfinite(peak):
            peak = duration / 4
        out[var] = Kernel(shape, duration, peak)
    return out
