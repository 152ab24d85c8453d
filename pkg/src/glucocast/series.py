"""Time-series substrate: variables, event and uniform series, alignment and lag embedding.

Timestamps are integer seconds since the Unix epoch (UTC). Gaps in uniform
series are stored as NaN; a gap is never silently replaced by zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

BASE_STEP_S = 300


class Variable(str, Enum):
    GLUCOSE = "glucose"
    INSULIN_BOLUS = "insulin_bolus"
    INSULIN_BASAL = "insulin_basal"
    CARBS = "carbs"
    EXERCISE = "exercise"
    HEART_RATE = "heart_rate"
    SLEEP = "sleep"
    SCHEDULE = "schedule"
    # derived namespace: on-board features, never read from sample files
    IOB = "iob"
    COB = "cob"
    EOB = "eob"

    @property
    def derived(self) -> bool:
        return self in DERIVED_VARIABLES

    @property
    def unit(self) -> str:
        return UNITS[self]

    def __str__(self) -> str:
        return self.value


DERIVED_VARIABLES = frozenset({Variable.IOB, Variable.COB, Variable.EOB})
BASE_VARIABLES = tuple(v for v in Variable if v not in DERIVED_VARIABLES)

UNITS = {
    Variable.GLUCOSE: "mg/dL",
    Variable.INSULIN_BOLUS: "U",
    Variable.INSULIN_BASAL: "U",
    Variable.CARBS: "g",
    Variable.EXERCISE: "intensity",
    Variable.HEART_RATE: "bpm",
    Variable.SLEEP: "state",
    Variable.SCHEDULE: "h",
    Variable.IOB: "U",
    Variable.COB: "g",
    Variable.EOB: "intensity*min",
}

DOSE_VARIABLES = frozenset({Variable.INSULIN_BOLUS, Variable.INSULIN_BASAL, Variable.CARBS})

# how each variable is put on a common grid
AGGREGATION = {
    Variable.GLUCOSE: "mean",
    Variable.INSULIN_BOLUS: "sum",
    Variable.INSULIN_BASAL: "sum",
    Variable.CARBS: "sum",
    Variable.EXERCISE: "mean",
    Variable.HEART_RATE: "mean",
    Variable.SLEEP: "last",
    Variable.SCHEDULE: "last",
    Variable.IOB: "mean",
    Variable.COB: "mean",
    Variable.EOB: "mean",
}


class MissingVariableError(KeyError):
    pass


class EmptySetError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    start: int
    step_s: int
    n: int

    def __post_init__(self):
        if self.step_s <= 0:
            raise ValueError(f"step_s must be positive, got {self.step_s}")
        if self.n < 0:
            raise ValueError("grid length must be non-negative")

    @property
    def times(self) -> np.ndarray:
        return self.start + self.step_s * np.arange(self.n, dtype=np.int64)

    @property
    def end(self) -> int:
        return self.start + self.n * self.step_s


@dataclass(frozen=True, eq=False)
class EventSeries:
    """Irregular timestamped events of one variable, e.g. boluses or meals."""

    variable: Variable
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variable", Variable(self.variable))
        times = _frozen(self.times, np.int64)
        values = _frozen(self.values, np.float64)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError(f"{self.variable}: event timestamps must be strictly increasing")
        if self.variable in DOSE_VARIABLES and np.any(values < 0):
            raise ValueError(f"{self.variable}: dose values must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def unit(self) -> str:
        return self.variable.unit

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EventSeries)
            and self.variable == other.variable
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    def merge(self, other: "EventSeries") -> "EventSeries":
        """Union of two event sets; coincident timestamps are summed."""
        t = np.concatenate([self.times, other.times])
        v = np.concatenate([self.values, other.values])
        ut, inv = np.unique(t, return_inverse=True)
        return EventSeries(self.variable, ut, np.bincount(inv, weights=v, minlength=ut.size))


@dataclass(frozen=True, eq=False)
class UniformSeries:
    """Fixed-step signal; ``values[i]`` is the sample at ``start + i*step_s``; NaN marks a gap."""

    variable: Variable
    start: int
    step_s: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variable", Variable(self.variable))
        if int(self.step_s) <= 0:
            raise ValueError(f"step_s must be positive, got {self.step_s}")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "step_s", int(self.step_s))
        values = _frozen(self.values, np.float64)
        if values.ndim != 1:
            raise ValueError("values must be 1-d")
        object.__setattr__(self, "values", values)

    @property
    def unit(self) -> str:
        return self.variable.unit

    @property
    def grid(self) -> Grid:
        return Grid(self.start, self.step_s, self.values.size)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def end(self) -> int:
        return self.start + self.step_s * self.values.size

    @property
    def gaps(self) -> np.ndarray:
        return np.isnan(self.values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, UniformSeries)
            and self.variable == other.variable
            and self.start == other.start
            and self.step_s == other.step_s
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def to_events(self, as_dose: bool = False) -> EventSeries:
        """Non-gap samples as events; ``as_dose`` multiplies by the step in minutes."""
        ok = ~self.gaps
        v = self.values[ok]
        if as_dose:
            v = v * (self.step_s / 60.0)
        return EventSeries(self.variable, self.times[ok], v)

    def window(self, lo: int, hi: int) -> "UniformSeries":
        """Samples with timestamps in [lo, hi)."""
        i0 = max(0, -(-(lo - self.start) // self.step_s))
        i1 = min(self.values.size, max(0, -(-(hi - self.start) // self.step_s)))
        i1 = max(i0, i1)
        return UniformSeries(self.variable, self.start + i0 * self.step_s, self.step_s, self.values[i0:i1])


Series = EventSeries | UniformSeries


@dataclass(frozen=True, eq=False)
class PatientRecord:
    patient_id: str
    span: tuple[int, int]
    series: Mapping[Variable, Series] = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = int(self.span[0]), int(self.span[1])
        if hi < lo:
            raise ValueError("span end precedes start")
        object.__setattr__(self, "span", (lo, hi))
        series = {Variable(k): v for k, v in self.series.items()}
        for var, s in series.items():
            if s.variable != var:
                raise ValueError(f"series keyed {var} holds {s.variable}")
            if isinstance(s, UniformSeries):
                if len(s) and (s.start < lo or s.end > hi):
                    raise ValueError(f"{var} extends outside the record span")
            elif len(s) and (s.times[0] < lo or s.times[-1] >= hi):
                raise ValueError(f"{var} events outside the record span")
        object.__setattr__(self, "series", dict(sorted(series.items(), key=lambda kv: _VAR_ORDER[kv[0]])))

    def __getitem__(self, var) -> Series:
        var = Variable(var)
        try:
            return self.series[var]
        except KeyError:
            raise MissingVariableError(f"{self.patient_id}: no {var.value} series") from None

    def __contains__(self, var) -> bool:
        return Variable(var) in self.series

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PatientRecord)
            and self.patient_id == other.patient_id
            and self.span == other.span
            and self.series.keys() == other.series.keys()
            and all(self.series[k] == other.series[k] for k in self.series)
        )


_VAR_ORDER = {v: i for i, v in enumerate(Variable)}


@dataclass(frozen=True, order=True)
class LagFeature:
    variable: Variable
    lag_steps: int

    def __post_init__(self):
        object.__setattr__(self, "variable", Variable(self.variable))
        if int(self.lag_steps) < 1:
            raise ValueError("lag_steps must be >= 1; the target time is never a feature")
        object.__setattr__(self, "lag_steps", int(self.lag_steps))

    @property
    def name(self) -> str:
        return f"{self.variable.value}[t-{self.lag_steps}]"

    def __str__(self) -> str:
        return self.name


def lag_columns(variables: Iterable[Variable] | Variable, max_lag: int) -> list[LagFeature]:
    """All lags ``1..max_lag`` for each variable, variable-major."""
    if isinstance(variables, (Variable, str)):
        variables = [variables]
    return [LagFeature(v, k) for v in variables for k in range(1, max_lag + 1)]


@dataclass(frozen=True, eq=False)
class SupervisedSet:
    """Lag-embedded design matrix with a horizon-shifted glucose target.

    Row ``i`` describes origin ``row_times[i]``: features are the series values
    ``lag_steps`` before the origin, the target is glucose ``horizon_steps``
    after it.
    """

    step_s: int
    horizon_steps: int
    columns: tuple[LagFeature, ...]
    X: np.ndarray
    y: np.ndarray
    row_times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        X = _frozen(np.asarray(self.X, dtype=np.float64).reshape(len(self.row_times), len(self.columns)),
                    np.float64)
        y = _frozen(self.y, np.float64)
        rt = _frozen(self.row_times, np.int64)
        if X.shape != (y.size, len(self.columns)) or rt.size != y.size:
            raise ValueError("X, y, row_times and columns disagree in shape")
        if np.isnan(X).any() or np.isnan(y).any():
            raise ValueError("supervised sets may not contain gaps")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "row_times", rt)

    def __len__(self) -> int:
        return self.y.size

    @property
    def horizon_s(self) -> int:
        return self.horizon_steps * self.step_s

    @property
    def max_lag(self) -> int:
        return max(c.lag_steps for c in self.columns)

    @property
    def target_times(self) -> np.ndarray:
        return self.row_times + self.horizon_s

    @property
    def feature_start_times(self) -> np.ndarray:
        return self.row_times - self.max_lag * self.step_s

    def column_index(self, feature: LagFeature) -> int:
        return self.columns.index(feature)

    def subset_rows(self, mask_or_index) -> "SupervisedSet":
        idx = np.asarray(mask_or_index)
        return SupervisedSet(self.step_s, self.horizon_steps, self.columns,
                             self.X[idx], self.y[idx], self.row_times[idx])

    def subset_columns(self, columns: Sequence[LagFeature]) -> "SupervisedSet":
        idx = [self.column_index(c) for c in columns]
        return SupervisedSet(self.step_s, self.horizon_steps, tuple(columns),
                             self.X[:, idx], self.y, self.row_times)

    @staticmethod
    def concat(sets: Sequence["SupervisedSet"]) -> "SupervisedSet":
        """Stack sets sharing columns, step and horizon (e.g. pooling patients)."""
        if not sets:
            raise EmptySetError("nothing to concatenate")
        first = sets[0]
        for s in sets[1:]:
            if (s.columns, s.step_s, s.horizon_steps) != (first.columns, first.step_s, first.horizon_steps):
                raise ValueError("sets differ in columns, step or horizon")
        return SupervisedSet(first.step_s, first.horizon_steps, first.columns,
                             np.vstack([s.X for s in sets]),
                             np.concatenate([s.y for s in sets]),
                             np.concatenate([s.row_times for s in sets]))


# --------------------------------------------------------------------------- operations


def resample(events: EventSeries, step_s: int, aggregation: str = "sum",
             start: int | None = None, n_bins: int | None = None) -> UniformSeries:
    """Bin events onto a uniform grid.

    Bin ``i`` covers ``[start + i*step_s, start + (i+1)*step_s)``. Empty bins
    are 0 for ``sum`` and a gap otherwise. Without an explicit ``start`` the
    grid begins at the first event; without ``n_bins`` it ends after the last.
    """
    if step_s <= 0:
        raise ValueError(f"step_s must be positive, got {step_s}")
    if aggregation not in ("sum", "mean", "last"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    t, v = events.times, events.values
    if start is None:
        start = int(t[0]) if t.size else 0
    if n_bins is None:
        n_bins = int((t[-1] - start) // step_s + 1) if t.size and t[-1] >= start else 0
    idx = (t - start) // step_s
    keep = (idx >= 0) & (idx < n_bins)
    idx, v = idx[keep], v[keep]
    if aggregation == "sum":
        out = np.bincount(idx, weights=v, minlength=n_bins).astype(np.float64)
    elif aggregation == "mean":
        sums = np.bincount(idx, weights=v, minlength=n_bins)
        counts = np.bincount(idx, minlength=n_bins)
        out = np.full(n_bins, np.nan)
        nz = counts > 0
        out[nz] = sums[nz] / counts[nz]
    else:
        out = np.full(n_bins, np.nan)
        if idx.size:
            is_last = np.r_[idx[1:] != idx[:-1], True]
            out[idx[is_last]] = v[is_last]
    return UniformSeries(events.variable, start, step_s, out)


def interpolate_gaps(s: UniformSeries, max_gap_steps: int = 6) -> UniformSeries:
    """Linearly fill interior gap runs of length <= ``max_gap_steps``; longer runs stay gaps."""
    v = s.values.copy()
    gap = np.isnan(v)
    if not gap.any() or gap.all():
        return s
    for lo, hi in _runs(gap):
        if lo == 0 or hi == v.size or hi - lo > max_gap_steps:
            continue
        a, b = v[lo - 1], v[hi]
        frac = np.arange(1, hi - lo + 1) / (hi - lo + 1)
        v[lo:hi] = a + (b - a) * frac
    return UniformSeries(s.variable, s.start, s.step_s, v)


def fill_gaps(s: UniformSeries, max_gap_steps: int = 6) -> list[UniformSeries]:
    """Interpolate short interior gaps and split the series at the remaining ones.

    Leading and trailing gaps are trimmed. Returns gap-free contiguous segments.
    """
    filled = interpolate_gaps(s, max_gap_steps)
    ok = ~np.isnan(filled.values)
    return [UniformSeries(s.variable, s.start + lo * s.step_s, s.step_s, filled.values[lo:hi])
            for lo, hi in _runs(ok)]


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of consecutive True entries."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def downsample(s: UniformSeries, factor: int) -> UniformSeries:
    """Keep every ``factor``-th sample starting at index 0."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    return UniformSeries(s.variable, s.start, s.step_s * factor, s.values[::factor])


def _to_grid(s: Series, grid: Grid) -> UniformSeries:
    agg = AGGREGATION[s.variable]
    if isinstance(s, UniformSeries):
        if s.step_s == grid.step_s and (grid.start - s.start) % s.step_s == 0:
            w = s.window(grid.start, grid.end)
            out = np.full(grid.n, np.nan)
            off = (w.start - grid.start) // grid.step_s
            out[off:off + len(w)] = w.values
            return UniformSeries(s.variable, grid.start, grid.step_s, out)
        ev = s.to_events()
    else:
        ev = s
    return resample(ev, grid.step_s, agg, start=grid.start, n_bins=grid.n)


def align(record: PatientRecord, step_s: int = BASE_STEP_S,
          variables: Iterable[Variable] | None = None) -> dict[Variable, UniformSeries]:
    """Put every series of a record on one grid.

    The grid is clipped to the intersection of the record span and the spans of
    its uniform series. Dose-like variables are summed per bin, level-like ones
    averaged, state-like ones take the last value.
    """
    if Variable.GLUCOSE not in record:
        raise MissingVariableError(f"{record.patient_id}: no glucose series")
    if step_s <= 0:
        raise ValueError("step_s must be positive")
    wanted = record.series if variables is None else {Variable(v): record[v] for v in variables}
    lo, hi = record.span
    for s in record.series.values():
        if isinstance(s, UniformSeries):
            lo, hi = max(lo, s.start), min(hi, s.end)
    n = max(0, (hi - lo) // step_s)
    grid = Grid(lo, step_s, n)
    out = {Variable.GLUCOSE: _to_grid(record[Variable.GLUCOSE], grid)}
    for var, s in wanted.items():
        if var not in out:
            out[var] = _to_grid(s, grid)
    return out


def embed(aligned: Mapping[Variable, UniformSeries], columns: Sequence[LagFeature],
          horizon_steps: int, target: Variable = Variable.GLUCOSE) -> SupervisedSet:
    """Lag-embed aligned series into a supervised set.

    Row at index ``t`` has ``X[t, j] = series_j[t - lag_j]`` and
    ``y[t] = target[t + horizon_steps]``. Rows touching a gap or the series
    boundary are dropped.
    """
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    if not columns:
        raise ValueError("at least one column is required")
    tgt = aligned.get(Variable(target))
    if tgt is None:
        raise MissingVariableError(f"no {Variable(target).value} series to predict")
    for c in columns:
        if c.variable not in aligned:
            raise MissingVariableError(f"no {c.variable.value} series for column {c.name}")
        s = aligned[c.variable]
        if (s.start, s.step_s, len(s)) != (tgt.start, tgt.step_s, len(tgt)):
            raise ValueError(f"{c.variable.value} is not on the target grid; align first")
    n = len(tgt)
    max_lag = max(c.lag_steps for c in columns)
    if max_lag + horizon_steps >= n:
        raise EmptySetError(f"max lag {max_lag} + horizon {horizon_steps} leaves no rows in {n} samples")
    t = np.arange(max_lag, n - horizon_steps)
    X = np.column_stack([aligned[c.variable].values[t - c.lag_steps] for c in columns])
    y = tgt.values[t + horizon_steps]
    ok = ~(np.isnan(X).any(axis=1) | np.isnan(y))
    return SupervisedSet(tgt.step_s, horizon_steps, tuple(columns), X[ok], y[ok],
                         tgt.start + t[ok] * tgt.step_s)


# --------------------------------------------------------------------------- CSV sample files

CSV_HEADER = ("patient_id", "timestamp", "variable", "value", "unit")


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no UTC offset")
    return int(dt.timestamp())


def write_csv(record: PatientRecord, path) -> None:
    """Write a record as long-format CSV; gap samples are written with an empty value."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for var, s in record.series.items():
            if var.derived:
                raise ValueError(f"derived variable {var.value} cannot be exported")
            for t, v in zip(s.times.tolist(), s.values.tolist()):
                w.writerow((record.patient_id, format_timestamp(t), var.value,
                            "" if math.isnan(v) else repr(v), var.unit))


def read_csv(path, default_step_s: int = BASE_STEP_S) -> PatientRecord:
    """Read a sample file written by :func:`write_csv`.

    Dose-like variables become event series; all others become uniform series
    whose step is inferred from consecutive timestamps.
    """
    path = Path(path)
    rows: dict[Variable, tuple[list[int], list[float]]] = {}
    patient = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(1, f"expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            pid, ts, name, value, unit = row
            if patient is None:
                patient = pid
            elif pid != patient:
                raise ParseError(lineno, f"mixed patient ids {patient!r} and {pid!r}")
            try:
                var = Variable(name)
            except ValueError:
                raise ParseError(lineno, f"unknown variable {name!r}") from None
            if var.derived:
                raise ParseError(lineno, f"derived variable {name!r} not allowed in sample files")
            if unit != var.unit:
                raise ParseError(lineno, f"unit {unit!r} does not match {var.value} unit {var.unit!r}")
            try:
                t = parse_timestamp(ts)
            except ValueError as exc:
                raise ParseError(lineno, f"bad timestamp {ts!r}: {exc}") from None
            if value == "":
                if var in DOSE_VARIABLES:
                    raise ParseError(lineno, f"{var.value} events need a value")
                x = math.nan
            else:
                try:
                    x = float(value)
                except ValueError:
                    raise ParseError(lineno, f"bad value {value!r}") from None
            times, values = rows.setdefault(var, ([], []))
            if times and t <= times[-1]:
                raise ParseError(lineno, f"{var.value} timestamps not strictly increasing")
            times.append(t)
            values.append(x)
    series: dict[Variable, Series] = {}
    for var, (times, values) in rows.items():
        if var in DOSE_VARIABLES:
            series[var] = EventSeries(var, times, values)
        else:
            t = np.asarray(times, dtype=np.int64)
            steps = np.unique(np.diff(t))
            if steps.size > 1:
                raise ParseError(0, f"{var.value} samples are not uniformly spaced")
            step = int(steps[0]) if steps.size else default_step_s
            series[var] = UniformSeries(var, int(t[0]), step, values)
    if not series:
        return PatientRecord(patient or path.stem, (0, 0), {})
    lo = min(int(s.start) if isinstance(s, UniformSeries) else int(s.times[0])
             for s in series.values() if len(s))
    hi = max(s.end if isinstance(s, UniformSeries) else int(s.times[-1]) + 1
             for s in series.values() if len(s))
    return PatientRecord(patient, (lo, hi), series)
