"""Walk-forward accuracy grid and resource benchmark.

Every cell is embedded on the 300 s base grid: a sampling period of
``step_s`` means glucose lags spaced ``step_s`` apart and forecast origins on
the coarse grid, so horizons need not be multiples of the sampling period.
For a period of ``step_s`` the history window holds
``history_h * 3600 / step_s`` samples. As in :func:`~glucocast.series.embed`,
the latest sample is one base step before the origin, at every period.

Records are split by calendar days: training rows have their target before
``start + train_days``; test rows have their whole feature window at or after
it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import resource
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import _seeds
from .models import (ArimaModel, ArimaSpec, PersistenceSpec, RFSpec, SVRSpec, fit, predict_set,
                     select_arima)
from .models.base import ForecasterSpec
from .onboard import onboard_features
from .series import (AGGREGATION, BASE_STEP_S, EmptySetError, LagFeature, MissingVariableError,
                     PatientRecord, SupervisedSet, UniformSeries, Variable, align, embed,
                     interpolate_gaps, _runs)

log = logging.getLogger(__name__)

FEATURE_MODES = ("univariate_glucose", "multivariate", "multivariate_onboard")
RAW_EXTRAS = (Variable.INSULIN_BOLUS, Variable.CARBS, Variable.EXERCISE, Variable.HEART_RATE)
ONBOARD_EXTRAS = (Variable.IOB, Variable.COB, Variable.EOB, Variable.HEART_RATE)
DAY_S = 86_400


def rmse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    d = pred - actual
    return float(np.sqrt(np.mean(d * d)))


def mae(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.abs(pred - actual)))


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.size != actual.size:
        raise ValueError(f"length mismatch: {pred.size} predictions, {actual.size} actuals")
    if pred.size == 0:
        raise ValueError("no predictions")
    return pred, actual


@dataclass(frozen=True)
class EvalConfig:
    models: tuple = (ArimaSpec(), RFSpec(), SVRSpec())
    step_s_options: tuple[int, ...] = (300, 600, 900)
    history_options: tuple[float, ...] = (3, 6, 12)
    horizon_options: tuple[int, ...] = (15, 30, 45, 60)
    train_days: float = 10
    test_days: float = 4
    feature_mode: str = "univariate_glucose"
    seed: int = 0
    workers: int = 1
    max_gap_steps: int = 6
    kernels: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ValueError("at least one model is required")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        for s in self.step_s_options:
            if s <= 0 or s % BASE_STEP_S:
                raise ValueError(f"step {s} s is not a multiple of the {BASE_STEP_S} s base grid")
            for h in self.history_options:
                if (h * 3600) % s or h <= 0:
                    raise ValueError(f"history {h} h is not a whole number of {s} s samples")
        for m in self.horizon_options:
            if m <= 0 or (m * 60) % BASE_STEP_S:
                raise ValueError(f"horizon {m} min is not a multiple of the {BASE_STEP_S} s base grid")
        if self.train_days <= 0 or self.test_days <= 0:
            raise ValueError("train and test spans must be positive")


@dataclass(frozen=True)
class EvalRow:
    patient_id: str
    model: str
    step_s: int
    history_h: float
    horizon_min: int
    n: int
    rmse: float
    mae: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


EVAL_HEADER = ("patient_id", "model", "step_s", "history_h", "horizon_min", "n", "rmse", "mae")


def _num(x: float) -> str:
    return "" if not math.isfinite(x) else f"{x:.6f}"


def _hours(h: float) -> str:
    return f"{h:g}"


def write_eval_csv(rows: Sequence[EvalRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for r in rows:
            w.writerow((r.patient_id, r.model, r.step_s, _hours(r.history_h), r.horizon_min, r.n,
                        _num(r.rmse), _num(r.mae)))


def read_eval_csv(path) -> list[EvalRow]:
    out = []
    with Path(path).open(newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != EVAL_HEADER:
            raise ValueError(f"{path}: expected header {','.join(EVAL_HEADER)}")
        for d in rd:
            val = lambda k: float(d[k]) if d[k] else float("nan")
            n = int(d["n"])
            out.append(EvalRow(d["patient_id"], d["model"], int(d["step_s"]), float(d["history_h"]),
                               int(d["horizon_min"]), n, val("rmse"), val("mae"),
                               None if n > 0 else "error row"))
    return out


def write_jsonl(rows, path) -> None:
    with Path(path).open("w") as fh:
        for r in rows:
            d = asdict(r)
            for k, v in d.items():
                if isinstance(v, float) and not math.isfinite(v):
                    d[k] = None
            fh.write(json.dumps(d) + "\n")


# --------------------------------------------------------------------------- features


def _trailing(values: np.ndarray, f: int, how: str) -> np.ndarray:
    """Aggregate the ``f`` base bins ending at each index (gap if any bin is a gap)."""
    if f == 1 or how == "last":
        return values
    c = np.concatenate([[0.0], np.cumsum(values)])
    out = np.full(values.size, np.nan)
    out[f - 1:] = c[f:] - c[:-f]
    if how == "mean":
        out /= f
    return out


class PreparedRecord:
    """Base-grid series of one record plus its train/test split."""

    def __init__(self, record: PatientRecord, config: EvalConfig):
        self.record = record
        self.config = config
        mode = config.feature_mode
        if mode == "univariate_glucose":
            aligned = align(record, BASE_STEP_S, variables=[Variable.GLUCOSE])
        else:
            want = [v for v in RAW_EXTRAS if v in record] if mode == "multivariate" else \
                [v for v in (Variable.HEART_RATE,) if v in record]
            aligned = align(record, BASE_STEP_S, variables=[Variable.GLUCOSE, *want])
            if mode == "multivariate_onboard":
                aligned.update(onboard_features(aligned, record.series, config.kernels))
            extras = RAW_EXTRAS if mode == "multivariate" else ONBOARD_EXTRAS
            missing = [v.value for v in extras if v not in aligned]
            if missing:
                raise MissingVariableError(f"{record.patient_id}: missing {', '.join(missing)}")
        g = aligned[Variable.GLUCOSE]
        aligned[Variable.GLUCOSE] = interpolate_gaps(g, config.max_gap_steps)
        self.aligned = aligned
        self.glucose = aligned[Variable.GLUCOSE]
        self.start = self.glucose.start
        self.split = self.start + int(round(config.train_days * DAY_S))
        self.test_end = self.split + int(round(config.test_days * DAY_S))
        if self.test_end > self.glucose.end:
            raise ValueError(f"{record.patient_id}: {config.train_days}+{config.test_days} days exceed "
                             f"the {(self.glucose.end - self.start) / DAY_S:.2f}-day record")
        self._arima: dict[int, ArimaModel | Exception] = {}

    def extras(self) -> tuple[Variable, ...]:
        mode = self.config.feature_mode
        return () if mode == "univariate_glucose" else RAW_EXTRAS if mode == "multivariate" else ONBOARD_EXTRAS

    def design(self, step_s: int, history_h: float, horizon_min: int) -> tuple[SupervisedSet, SupervisedSet]:
        f = step_s // BASE_STEP_S
        n_lags = int(round(history_h * 3600 / step_s))
        h = horizon_min * 60 // BASE_STEP_S
        lags = [f * (k - 1) + 1 for k in range(1, n_lags + 1)]
        cols = [LagFeature(Variable.GLUCOSE, k) for k in lags]
        series = {Variable.GLUCOSE: self.glucose}
        for v in self.extras():
            s = self.aligned[v]
            if v in RAW_EXTRAS:
                # each lag summarises the sampling period ending at it
                series[v] = UniformSeries(v, s.start, s.step_s, _trailing(s.values, f, AGGREGATION[v]))
                cols += [LagFeature(v, k) for k in lags]
            else:
                # on-board amounts already summarise the past; only the current value is used
                series[v] = s
                cols.append(LagFeature(v, 1))
        full = embed(series, cols, h)
        on_grid = ((full.row_times - self.start) // BASE_STEP_S) % f == 0
        full = full.subset_rows(on_grid)
        train = full.subset_rows(full.target_times < self.split)
        test = full.subset_rows((full.feature_start_times >= self.split) & (full.target_times < self.test_end))
        if len(train) == 0:
            raise EmptySetError("no training rows")
        if len(test) == 0:
            raise EmptySetError("no test rows")
        # leakage guard
        assert train.target_times.max() < test.feature_start_times.min(), "train targets overlap test features"
        return train, test

    def coarse_glucose(self, step_s: int) -> UniformSeries:
        """Glucose every ``step_s``, in the phase of the lag windows (one base step before origins)."""
        f = step_s // BASE_STEP_S
        g = self.glucose
        return UniformSeries(Variable.GLUCOSE, g.start + (f - 1) * BASE_STEP_S, step_s, g.values[f - 1::f])

    def arima(self, step_s: int, spec: ArimaSpec) -> ArimaModel:
        key = (step_s, spec)
        if key not in self._arima:
            try:
                self._arima[key] = self._fit_arima(step_s, spec)
            except Exception as exc:  # cached so every cell of this step reports it
                self._arima[key] = exc
        m = self._arima[key]
        if isinstance(m, Exception):
            raise m
        return m

    def _fit_arima(self, step_s, spec):
        g = self.coarse_glucose(step_s)
        n_train = int((self.split - g.start) // step_s)
        v = g.values[:n_train]
        segs = [v[lo:hi] for lo, hi in _runs(~np.isnan(v)) if hi - lo > 10]
        if not segs:
            raise EmptySetError("no gap-free training segment for ARIMA")
        return select_arima(segs, spec, step_s=step_s)


def arima_predict(model: ArimaModel, test: SupervisedSet, step_s: int) -> np.ndarray:
    """Forecast each test row's target from its glucose lag window.

    When the lead from the latest sample to the target is not a whole number of
    sampling periods, the forecast is interpolated linearly between the
    neighbouring whole-step forecasts.
    """
    idx = [j for j, c in enumerate(test.columns) if c.variable == Variable.GLUCOSE]
    hist = test.X[:, idx][:, ::-1]  # oldest first
    lead_s = test.horizon_s + test.columns[idx[0]].lag_steps * test.step_s
    r = lead_s / step_s
    hi = math.ceil(r)
    out = np.empty(len(test))
    for i in range(len(test)):
        fc = model.forecast(hist[i], hi)
        if hi == r:
            out[i] = fc[-1]
        else:
            lo_val = fc[hi - 2] if hi >= 2 else hist[i, -1]
            w = r - (hi - 1)
            out[i] = (1 - w) * lo_val + w * fc[-1]
    return out


def evaluate_cell(prep: PreparedRecord, spec: ForecasterSpec, step_s: int, history_h: float,
                  horizon_min: int) -> EvalRow:
    pid = prep.record.patient_id
    train, test = prep.design(step_s, history_h, horizon_min)
    if spec.kind == "arima":
        pred = arima_predict(prep.arima(step_s, spec), test, step_s)
    else:
        pred = predict_set(fit(spec, train), test)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite forecast")
    return EvalRow(pid, spec.kind, step_s, history_h, horizon_min, len(test), rmse(pred, test.y), mae(pred, test.y))


def walk_forward(record: PatientRecord, spec: ForecasterSpec, step_s: int, history_h: float,
                 horizon_min: int, config: EvalConfig | None = None) -> EvalRow:
    """Evaluate one (model, step, history, horizon) cell on one record."""
    config = config or EvalConfig(models=(spec,), step_s_options=(step_s,), history_options=(history_h,),
                                  horizon_options=(horizon_min,))
    return evaluate_cell(PreparedRecord(record, config), spec, step_s, history_h, horizon_min)


# --------------------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridResult:
    rows: list[EvalRow]
    baseline: list[EvalRow]

    @property
    def n_errors(self) -> int:
        return sum(not r.ok for r in self.rows)


def _cells(config: EvalConfig):
    return [(s, h, m) for s in config.step_s_options for h in config.history_options for m in config.horizon_options]


def _seeded(spec, seed: int):
    return replace(spec, seed=seed) if isinstance(spec, RFSpec) else spec


def _error_row(pid, spec, s, h, m, exc) -> EvalRow:
    return EvalRow(pid, spec.kind, s, h, m, 0, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}")


def _run_patient(args):
    p_index, record, config = args
    cells = _cells(config)
    rows, base = [], []
    with threadpool_limits(1):
        try:
            prep = PreparedRecord(record, config)
        except Exception as exc:
            prep = exc
        for m_index, spec in enumerate(config.models):
            for c_index, (s, h, m) in enumerate(cells):
                index = (p_index * len(config.models) + m_index) * len(cells) + c_index
                seed = _seeds.derive_int(config.seed, index)
                try:
                    if isinstance(prep, Exception):
                        raise prep
                    row = evaluate_cell(prep, _seeded(spec, seed), s, h, m)
                except AssertionError:
                    raise
                except Exception as exc:
                    log.warning("%s %s step=%d history=%g horizon=%d failed: %s",
                                record.patient_id, spec.kind, s, h, m, exc)
                    row = _error_row(record.patient_id, spec, s, h, m, exc)
                rows.append(row)
        for s, h, m in cells:
            try:
                if isinstance(prep, Exception):
                    raise prep
                base.append(evaluate_cell(prep, PersistenceSpec(), s, h, m))
            except AssertionError:
                raise
            except Exception as exc:
                base.append(_error_row(record.patient_id, PersistenceSpec(), s, h, m, exc))
    return rows, base


def run_grid(cohort: Sequence[PatientRecord], config: EvalConfig = EvalConfig()) -> GridResult:
    """Evaluate the full (patient, model, step, history, horizon) product.

    Rows come back patient-major in configuration order whatever the worker
    count; persistence baseline rows for every cell are returned separately.
    Failing cells become error rows.
    """
    jobs = [(i, r, config) for i, r in enumerate(cohort)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(config.workers, len(jobs))) as pool:
            parts = list(pool.map(_run_patient, jobs))
    else:
        parts = [_run_patient(j) for j in jobs]
    rows = [r for p, _ in parts for r in p]
    base = [r for _, b in parts for r in b]
    return GridResult(rows, base)


# --------------------------------------------------------------------------- report


@dataclass(frozen=True)
class SummaryRow:
    model: str
    step_s: int
    history_h: float
    horizon_min: int
    n_patients: int
    rmse_mean: float
    rmse_sd: float
    mae_mean: float
    mae_sd: float
    persistence_rmse: float
    best: bool = False
    flag: str = ""


def _mean_sd(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0


def report(rows: Sequence[EvalRow], baseline: Sequence[EvalRow] = ()) -> list[SummaryRow]:
    """Mean and sd across patients for each (model, step, history, horizon).

    Within each (step, history, horizon) the lowest mean RMSE is marked best;
    a best model that does not beat persistence is flagged.
    """
    if not rows:
        raise ValueError("no rows to report")
    key = lambda r: (r.model, r.step_s, r.history_h, r.horizon_min)
    groups: dict = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r)
    pers: dict = {}
    for r in list(baseline) + [r for r in rows if r.model == "persistence"]:
        if r.ok:
            pers.setdefault((r.step_s, r.history_h, r.horizon_min), {})[r.patient_id] = r.rmse
    out = []
    for k in sorted(groups, key=lambda k: (k[1], k[2], k[3], k[0])):
        ok = [r for r in groups[k] if r.ok]
        rm, rs = _mean_sd([r.rmse for r in ok])
        mm, ms = _mean_sd([r.mae for r in ok])
        pv = pers.get(k[1:], {})
        pm = float(np.mean(list(pv.values()))) if pv else float("nan")
        out.append(SummaryRow(*k, len(ok), rm, rs, mm, ms, pm))
    cells: dict = {}
    for i, s in enumerate(out):
        cells.setdefault((s.step_s, s.history_h, s.horizon_min), []).append(i)
    for idx in cells.values():
        finite = [i for i in idx if math.isfinite(out[i].rmse_mean)]
        if not finite:
            continue
        b = min(finite, key=lambda i: (out[i].rmse_mean, out[i].model))
        flag = "persistence_not_beaten" if out[b].rmse_mean > out[b].persistence_rmse else ""
        out[b] = replace(out[b], best=True, flag=flag)
    return out


SUMMARY_HEADER = ("model", "step_s", "history_h", "horizon_min", "n_patients", "rmse_mean", "rmse_sd",
                  "mae_mean", "mae_sd", "persistence_rmse", "best", "flag")


def write_summary_csv(summary: Sequence[SummaryRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summary:
            w.writerow((s.model, s.step_s, _hours(s.history_h), s.horizon_min, s.n_patients, _num(s.rmse_mean),
                        _num(s.rmse_sd), _num(s.mae_mean), _num(s.mae_sd), _num(s.persistence_rmse),
                        int(s.best), s.flag))


def format_table(summary: Sequence[SummaryRow]) -> str:
    """Aligned text table; ``*`` marks the best model of each cell, ``!`` a flagged cell."""
    head = ("model", "step_s", "hist_h", "hor_min", "n", "rmse", "mae", "persist", "")
    body = []
    for s in summary:
        mark = ("*" if s.best else "") + ("!" if s.flag else "")
        body.append((s.model, str(s.step_s), _hours(s.history_h), str(s.horizon_min), str(s.n_patients),
                     f"{s.rmse_mean:.2f} ± {s.rmse_sd:.2f}", f"{s.mae_mean:.2f} ± {s.mae_sd:.2f}",
                     f"{s.persistence_rmse:.2f}", mark))
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
    lines = [fmt(head), fmt(tuple("-" * w for w in widths)), *map(fmt, body)]
    ok = [s for s in summary if math.isfinite(s.rmse_mean)]
    if ok:
        b = min(ok, key=lambda s: (s.rmse_mean, s.model, s.step_s, s.history_h, s.horizon_min))
        lines.append(f"best cell: {b.model} step={b.step_s}s history={_hours(b.history_h)}h "
                     f"horizon={b.horizon_min}min rmse={b.rmse_mean:.2f}")
    return "\n".join(lines) + "\n"


def write_long_csv(rows: Sequence[EvalRow], path) -> None:
    """One line per (row, metric) for plotting."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "model", "step_s", "history_h", "horizon_min", "metric", "value"))
        for r in rows:
            if not r.ok:
                continue
            for metric in ("rmse", "mae"):
                w.writerow((r.patient_id, r.model, r.step_s, _hours(r.history_h), r.horizon_min, metric,
                            _num(getattr(r, metric))))


# --------------------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchConfig:
    thread_cap: int = 1
    repetitions: int = 21
    warmup: int = 3

    def __post_init__(self):
        if self.thread_cap < 1:
            raise ValueError("thread_cap must be >= 1")
        if self.repetitions < 3:
            raise ValueError("at least 3 repetitions are required")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@dataclass(frozen=True)
class BenchRow:
    model: str
    n: int
    fit_ms_median: float
    fit_ms_p95: float
    predict_ms_median: float
    predict_ms_p95: float
    peak_rss_bytes: int
    rss_supported: bool
    fit_cv: float
    fit_ms: tuple[float, ...] = field(default=(), repr=False)


BENCH_HEADER = ("model", "n", "fit_ms_median", "fit_ms_p95", "predict_ms_median", "predict_ms_p95",
                "peak_rss_bytes", "rss_supported", "fit_cv")


def peak_rss_bytes() -> tuple[int, bool]:
    try:
        r = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, OSError):
        return 0, False
    # kilobytes on Linux, bytes on macOS
    return (int(r) if sys.platform == "darwin" else int(r) * 1024), True


def _fit_for_bench(spec, train: SupervisedSet, thread_cap: int):
    if spec.kind == "arima":
        # the target column in row order stands in for the glucose series
        return select_arima(train.y, spec, step_s=train.step_s)
    if spec.kind == "rf":
        spec = replace(spec, workers=thread_cap)
    return fit(spec, train)


def _predict_once(model, train: SupervisedSet):
    if isinstance(model, ArimaModel):
        return model.predict(train.y[-max(model.p + model.d, 1) - model.q - 8:], train.horizon_steps)
    return model.predict_one(train.X[0])


def bench(spec: ForecasterSpec, train: SupervisedSet, config: BenchConfig = BenchConfig()) -> BenchRow:
    """Time ``config.repetitions`` fits and single-row predictions after ``config.warmup`` discarded runs.

    All internal parallelism is capped at ``config.thread_cap``.
    """
    fit_t, pred_t = [], []
    with threadpool_limits(config.thread_cap):
        for k in range(config.warmup + config.repetitions):
            t0 = time.perf_counter()
            model = _fit_for_bench(spec, train, config.thread_cap)
            t1 = time.perf_counter()
            _predict_once(model, train)
            t2 = time.perf_counter()
            if k >= config.warmup:
                fit_t.append((t1 - t0) * 1e3)
                pred_t.append((t2 - t1) * 1e3)
    f = np.array(fit_t)
    p = np.array(pred_t)
    rss, ok = peak_rss_bytes()
    cv = float(f.std(ddof=1) / f.mean()) if f.size > 1 and f.mean() > 0 else 0.0
    return BenchRow(spec.kind, len(train), float(np.median(f)), float(np.percentile(f, 95)),
                    float(np.median(p)), float(np.percentile(p, 95)), rss, ok, cv, tuple(fit_t))


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in rows:
            w.writerow((r.model, r.n, f"{r.fit_ms_median:.3f}", f"{r.fit_ms_p95:.3f}", f"{r.predict_ms_median:.4f}",
                        f"{r.predict_ms_p95:.4f}", r.peak_rss_bytes, int(r.rss_supported), f"{r.fit_cv:.4f}"))
