"""ARIMA(p, d, q) by conditional sum of squares.

After differencing ``d`` times, the innovations are

    e_t = w_t - c - sum_i phi_i w_{t-i} - sum_j theta_j e_{t-j},   t >= p,

with pre-sample innovations set to zero. Pure AR models have a closed-form
least-squares solution; otherwise the CSS is minimised with Nelder-Mead,
rejecting candidates whose AR or MA polynomial has a root of modulus
<= 1.001. Several gap-free segments can be fitted jointly; each is treated
as conditional on its own first ``p`` values.
"""

from __future__ import annotations

import itertools
import logging
import math
from typing import Sequence

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from ..series import UniformSeries
from .base import ArimaSpec, ConvergenceError

log = logging.getLogger(__name__)

ROOT_MARGIN = 1.001


def _as_segments(series) -> list[np.ndarray]:
    if isinstance(series, UniformSeries):
        series = [series.values]
    elif isinstance(series, np.ndarray) and series.ndim == 1:
        series = [series]
    segs = [np.asarray(s.values if isinstance(s, UniformSeries) else s, dtype=np.float64) for s in series]
    for s in segs:
        if np.isnan(s).any():
            raise ValueError("ARIMA input must be gap-free; split it into segments first")
    return segs


def roots_ok(coefs: np.ndarray, sign: float) -> bool:
    """True when ``1 + sign*(c1 z + c2 z^2 + ...)`` has all roots outside ``|z| = ROOT_MARGIN``."""
    coefs = np.asarray(coefs, dtype=np.float64)
    if coefs.size == 0 or not np.any(coefs):
        return True
    poly = np.r_[1.0, sign * coefs][::-1]  # highest degree first
    while poly.size > 1 and poly[0] == 0:
        poly = poly[1:]
    if poly.size == 1:
        return True
    return bool(np.all(np.abs(np.roots(poly)) > ROOT_MARGIN))


@numba.njit(cache=True)
def _stable(coefs, sign, margin):
    """Schur-Cohn step-down test of ``1 + sign*sum c_i z^i`` having no root with ``|z| <= margin``."""
    m = coefs.size
    a = np.empty(m)
    scale = 1.0
    for i in range(m):
        scale *= margin
        a[i] = sign * coefs[i] * scale
    while m > 0 and a[m - 1] == 0.0:
        m -= 1
    for order in range(m, 0, -1):
        k = a[order - 1]
        if abs(k) >= 1.0:
            return False
        d = 1.0 - k * k
        b = np.empty(order - 1)
        for i in range(order - 1):
            b[i] = (a[i] - k * a[order - 2 - i]) / d
        a[:order - 1] = b
    return True


@numba.njit(cache=True)
def _css_objective(x, w, bounds, p, q, margin):
    ar = x[1:1 + p]
    ma = x[1 + p:]
    if not (_stable(ar, -1.0, margin) and _stable(ma, 1.0, margin)):
        return np.inf
    c = x[0]
    total = 0.0
    e = np.zeros(q + 1)
    for s in range(bounds.size - 1):
        lo = bounds[s]
        hi = bounds[s + 1]
        if hi - lo <= p:
            continue
        e[:] = 0.0
        for t in range(lo + p, hi):
            r = w[t] - c
            for i in range(p):
                r -= ar[i] * w[t - 1 - i]
            for j in range(q):
                r -= ma[j] * e[j]
            for j in range(q - 1, 0, -1):
                e[j] = e[j - 1]
            if q:
                e[0] = r
            total += r * r
    return total


def _residuals(w: np.ndarray, c: float, ar: np.ndarray, ma: np.ndarray) -> np.ndarray:
    p = ar.size
    r = w[p:] - c
    for i in range(1, p + 1):
        r = r - ar[i - 1] * w[p - i:w.size - i]
    if ma.size:
        r = lfilter([1.0], np.r_[1.0, ma], r)
    return r


def css(segments: Sequence[np.ndarray], c: float, ar, ma) -> tuple[float, int]:
    """Conditional sum of squares and the number of innovations it sums over."""
    ar = np.asarray(ar, dtype=np.float64)
    ma = np.asarray(ma, dtype=np.float64)
    total, count = 0.0, 0
    for w in segments:
        if w.size <= ar.size:
            continue
        e = _residuals(w, c, ar, ma)
        total += float(e @ e)
        count += e.size
    return total, count


class ArimaModel:
    """Fitted ARIMA; ``intercept`` is the constant of the differenced recurrence."""

    def __init__(self, p, d, q, intercept, ar, ma, sigma2=float("nan"), n_obs=0, css_value=float("nan"),
                 spec: ArimaSpec | None = None, step_s: int | None = None):
        self.p, self.d, self.q = int(p), int(d), int(q)
        self.intercept = float(intercept)
        self.ar = np.asarray(ar, dtype=np.float64).reshape(self.p)
        self.ma = np.asarray(ma, dtype=np.float64).reshape(self.q)
        self.sigma2 = float(sigma2)
        self.n_obs = int(n_obs)
        self.css = float(css_value)
        self.spec = spec or ArimaSpec(self.p, self.d, self.q)
        self.step_s = step_s

    @property
    def n_params(self) -> int:
        return self.p + self.q + 1

    @property
    def aic(self) -> float:
        if self.n_obs == 0 or not self.css > 0:
            return float("inf") if self.n_obs == 0 else -float("inf")
        return self.n_obs * math.log(self.css / self.n_obs) + 2 * (self.n_params + 1)

    @property
    def mean(self) -> float:
        """Long-run mean of the differenced series."""
        return self.intercept / (1.0 - self.ar.sum()) if self.p else self.intercept

    def forecast(self, history, steps: int) -> np.ndarray:
        """Recursive forecasts 1..steps ahead of the end of ``history`` (future innovations 0)."""
        h = np.asarray(history, dtype=np.float64)
        if h.size < self.p + self.d or h.size == 0:
            raise ValueError(f"history of {h.size} samples is shorter than p + d = {self.p + self.d}")
        if np.isnan(h).any():
            raise ValueError("history contains a gap")
        if steps < 1:
            raise ValueError("steps must be >= 1")
        levels = [h]
        for _ in range(self.d):
            levels.append(np.diff(levels[-1]))
        w = levels[-1]
        if w.size > self.p:
            e = _residuals(w, self.intercept, self.ar, self.ma)
            e = np.r_[np.zeros(self.p), e]
        else:
            e = np.zeros(w.size)
        w_ext = list(w[-self.p:]) if self.p else []
        e_ext = list(e[-self.q:]) if self.q else []
        if len(e_ext) < self.q:
            e_ext = [0.0] * (self.q - len(e_ext)) + e_ext
        out = np.empty(steps)
        for k in range(steps):
            v = self.intercept
            for i in range(1, self.p + 1):
                v += self.ar[i - 1] * w_ext[-i]
            for j in range(1, self.q + 1):
                v += self.ma[j - 1] * e_ext[-j]
            if self.p:
                w_ext.append(v)
            if self.q:
                e_ext.append(0.0)
            out[k] = v
        # integrate back through each differencing order
        for lvl in reversed(levels[:-1]):
            out = lvl[-1] + np.cumsum(out)
        return out

    def predict(self, history, steps: int) -> float:
        return float(self.forecast(history, steps)[-1])


def _difference(segments, d):
    out = []
    for s in segments:
        w = np.diff(s, n=d) if d else s
        out.append(w)
    return out


def ar_least_squares(segments: Sequence[np.ndarray], p: int) -> tuple[float, np.ndarray]:
    """Intercept and AR coefficients minimising the conditional sum of squares."""
    rows, targets = [], []
    for w in segments:
        if w.size <= p:
            continue
        cols = [np.ones(w.size - p)] + [w[p - i:w.size - i] for i in range(1, p + 1)]
        rows.append(np.column_stack(cols))
        targets.append(w[p:])
    A = np.vstack(rows)
    b = np.concatenate(targets)
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return float(coef[0]), coef[1:]


def _start_values(segments, p, q):
    """Hannan-Rissanen style start: long-AR residuals as proxies for lagged innovations."""
    m = max(p + q, 8)
    c, ar_long = ar_least_squares(segments, m)
    rows, targets = [], []
    k = m + q
    for w in segments:
        if w.size <= k + p:
            continue
        e = np.r_[np.zeros(m), _residuals(w, c, ar_long, np.zeros(0))]
        t = np.arange(k, w.size)
        cols = [np.ones(t.size)] + [w[t - i] for i in range(1, p + 1)] + [e[t - j] for j in range(1, q + 1)]
        rows.append(np.column_stack(cols))
        targets.append(w[t])
    if not rows:
        return np.zeros(1 + p + q)
    coef, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(targets), rcond=None)
    x0 = coef.copy()
    for _ in range(60):
        if roots_ok(x0[1:1 + p], -1.0) and roots_ok(x0[1 + p:], 1.0):
            return x0
        x0[1:] *= 0.8
    x0[1:] = 0.0
    return x0


def fit_arima(series, p: int, d: int, q: int, method: str = "auto", max_iter: int | None = None,
              step_s: int | None = None) -> ArimaModel:
    """Fit ARIMA(p, d, q) by CSS.

    ``series`` is a gap-free UniformSeries, a 1-d array, or a list of gap-free
    segments. ``method="nelder-mead"`` forces the iterative optimiser even for
    pure AR orders.
    """
    if not (0 <= p <= 5 and 0 <= q <= 5 and 0 <= d <= 2):
        raise ValueError("orders must satisfy p, q <= 5 and d <= 2")
    segments = _as_segments(series)
    if step_s is None and isinstance(series, UniformSeries):
        step_s = series.step_s
    n_total = sum(s.size for s in segments)
    if n_total <= 10 * (p + q + 1) or max((s.size for s in segments), default=0) <= p + d + q:
        raise ValueError(f"series of {n_total} samples too short for ARIMA({p},{d},{q})")
    w = _difference(segments, d)
    spec = ArimaSpec(p, d, q)

    if q == 0 and method == "auto":
        c, ar = ar_least_squares(w, p)
        if roots_ok(ar, -1.0):
            value, count = css(w, c, ar, [])
            return ArimaModel(p, d, 0, c, ar, [], value / max(count, 1), count, value, spec, step_s)
        log.info("least-squares AR(%d) solution is non-stationary; falling back to Nelder-Mead", p)

    flat = np.concatenate(w)
    bounds = np.r_[0, np.cumsum([s.size for s in w])].astype(np.int64)
    objective = lambda x: _css_objective(x, flat, bounds, p, q, ROOT_MARGIN)

    x0 = _start_values(w, p, q) if (p or q) else np.array([np.mean(np.concatenate(w))])
    k = x0.size
    max_iter = max_iter or 400 * k
    scale = max(1.0, float(np.std(np.concatenate(w))))
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": max_iter, "maxfev": 2 * max_iter, "xatol": 1e-10,
                            "fatol": 1e-12 * scale ** 2, "adaptive": k > 2})
    if not res.success or not np.isfinite(res.fun):
        raise ConvergenceError(f"Nelder-Mead did not converge for ARIMA({p},{d},{q}) "
                               f"within {max_iter} iterations: {res.message}")
    x = res.x
    value, count = css(w, x[0], x[1:1 + p], x[1 + p:])
    return ArimaModel(p, d, q, x[0], x[1:1 + p], x[1 + p:], value / max(count, 1), count, value, spec, step_s)


def select_arima(series, spec: ArimaSpec = ArimaSpec(), step_s: int | None = None) -> ArimaModel:
    """Fit every order allowed by ``spec`` and return the lowest-AIC model."""
    ps = [spec.p] if spec.p is not None else range(spec.max_p + 1)
    qs = [spec.q] if spec.q is not None else range(spec.max_q + 1)
    ds = [spec.d] if spec.d is not None else spec.d_options
    best, failures = None, []
    for d, p, q in itertools.product(ds, ps, qs):
        try:
            m = fit_arima(series, p, d, q, step_s=step_s)
        except (ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
            failures.append(f"({p},{d},{q}): {exc}")
            continue
        if best is None or m.aic < best.aic:
            best = m
    if best is None:
        raise ConvergenceError("no ARIMA order could be fitted: " + "; ".join(failures))
    best.spec = spec
    return best
