"""epsilon-support-vector regression with an RBF kernel, solved by SMO.

The dual is written over ``2n`` variables ``beta = [alpha, alpha*]`` with
signs ``s = [+1, -1]``::

    min  1/2 beta' Q beta + p' beta    s.t.  s' beta = 0,  0 <= beta <= C
    Q_tu = s_t s_u k(x_t, x_u),  p = [eps - y, eps + y]

Each iteration updates the maximal violating pair; the solver stops once the
violation ``max_{I_up} -s G - min_{I_low} -s G`` is at most ``tol``. Kernel
rows are computed on demand and kept in an LRU cache of bounded size.

Inputs are standardised column-wise and the target is standardised, so
``epsilon`` and ``tol`` are in standardised target units.
"""

from __future__ import annotations

import numba
import numpy as np

from ..series import SupervisedSet
from .base import ConvergenceError, RegressionModel, Standardizer, SVRSpec


@numba.njit(cache=True, nogil=True)
def _kernel_row(X, sq, i, gamma, out):
    n, d = X.shape
    for j in range(n):
        acc = 0.0
        for k in range(d):
            acc += X[i, k] * X[j, k]
        dist = sq[i] + sq[j] - 2.0 * acc
        if dist < 0.0:
            dist = 0.0
        out[j] = np.exp(-gamma * dist)


@numba.njit(cache=True, nogil=True)
def _get_row(X, sq, gamma, i, rows, slot_of, row_of, stamp, clock):
    s = slot_of[i]
    if s < 0:
        s = 0
        for c in range(rows.shape[0]):
            if row_of[c] < 0:
                s = c
                break
            if stamp[c] < stamp[s]:
                s = c
        if row_of[s] >= 0:
            slot_of[row_of[s]] = -1
        row_of[s] = i
        slot_of[i] = s
        _kernel_row(X, sq, i, gamma, rows[s])
    stamp[s] = clock
    return s


@numba.njit(cache=True, nogil=True)
def _smo(X, y, C, eps, gamma, tol, max_iter, cache_rows, record):
    n = X.shape[0]
    m = 2 * n
    sq = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(X.shape[1]):
            acc += X[i, k] * X[i, k]
        sq[i] = acc
    rows = np.empty((cache_rows, n))
    slot_of = np.full(n, -1, dtype=np.int64)
    row_of = np.full(cache_rows, -1, dtype=np.int64)
    stamp = np.zeros(cache_rows, dtype=np.int64)

    beta = np.zeros(m)
    p = np.empty(m)
    for t in range(n):
        p[t] = eps - y[t]
        p[n + t] = eps + y[t]
    G = p.copy()
    trace = np.empty(max_iter + 1 if record else 1)
    if record:
        trace[0] = 0.0

    it = 0
    violation = np.inf
    while True:
        gmax = -np.inf
        gmin = np.inf
        i = -1
        j = -1
        for t in range(m):
            st = 1.0 if t < n else -1.0
            v = -st * G[t]
            if (st > 0 and beta[t] < C) or (st < 0 and beta[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
            if (st < 0 and beta[t] < C) or (st > 0 and beta[t] > 0):
                if v < gmin:
                    gmin = v
                    j = t
        violation = gmax - gmin
        if violation <= tol or i < 0 or j < 0 or it >= max_iter:
            break
        it += 1
        ii = i % n
        jj = j % n
        si = 1.0 if i < n else -1.0
        sj = 1.0 if j < n else -1.0
        slot_i = _get_row(X, sq, gamma, ii, rows, slot_of, row_of, stamp, 2 * it)
        slot_j = _get_row(X, sq, gamma, jj, rows, slot_of, row_of, stamp, 2 * it + 1)
        Ki = rows[slot_i]
        Kj = rows[slot_j]
        Qii = Ki[ii]
        Qjj = Kj[jj]
        Qij = si * sj * Ki[jj]
        old_i = beta[i]
        old_j = beta[j]
        if si != sj:
            quad = Qii + Qjj + 2.0 * Qij
            if quad <= 0.0:
                quad = 1e-12
            delta = (-G[i] - G[j]) / quad
            diff = beta[i] - beta[j]
            beta[i] += delta
            beta[j] += delta
            if diff > 0:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = diff
            else:
                if beta[i] < 0:
                    beta[i] = 0.0
                    beta[j] = -diff
            if diff > 0:
                if beta[i] > C:
                    beta[i] = C
                    beta[j] = C - diff
            else:
                if beta[j] > C:
                    beta[j] = C
                    beta[i] = C + diff
        else:
            quad = Qii + Qjj - 2.0 * Qij
            if quad <= 0.0:
                quad = 1e-12
            delta = (G[i] - G[j]) / quad
            total = beta[i] + beta[j]
            beta[i] -= delta
            beta[j] += delta
            if total > C:
                if beta[i] > C:
                    beta[i] = C
                    beta[j] = total - C
                if beta[j] > C:
                    beta[j] = C
                    beta[i] = total - C
            else:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = total
                if beta[i] < 0:
                    beta[i] = 0.0
                    beta[j] = total
        di = (beta[i] - old_i) * si
        dj = (beta[j] - old_j) * sj
        for t in range(n):
            g = Ki[t] * di + Kj[t] * dj
            G[t] += g
            G[n + t] -= g
        if record:
            acc = 0.0
            for t in range(m):
                acc += beta[t] * (G[t] + p[t])
            trace[it] = -0.5 * acc

    # bias: average over free variables, else any value consistent with the bounds
    ub = np.inf
    lb = -np.inf
    n_free = 0
    s_free = 0.0
    for t in range(m):
        st = 1.0 if t < n else -1.0
        yg = st * G[t]
        if beta[t] >= C:
            if st < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif beta[t] <= 0.0:
            if st > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            n_free += 1
            s_free += yg
    if n_free > 0:
        rho = s_free / n_free
    else:
        rho = min(max(0.0, lb), ub)
    return beta, G, it, violation, rho, trace[: it + 1] if record else trace


def kkt_violation(beta: np.ndarray, G: np.ndarray, C: float) -> float:
    """Maximal-violating-pair gap of a dual point (0 at exact optimality)."""
    n = beta.size // 2
    s = np.r_[np.ones(n), -np.ones(n)]
    v = -s * G
    up = ((s > 0) & (beta < C)) | ((s < 0) & (beta > 0))
    low = ((s < 0) & (beta < C)) | ((s > 0) & (beta > 0))
    return float(v[up].max(initial=-np.inf) - v[low].min(initial=np.inf))


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(d, 0.0))


class SVRModel(RegressionModel):
    """Fitted SVR. ``dual_coef`` holds ``alpha - alpha*`` of the support vectors."""

    def __init__(self, spec, columns, horizon_steps, step_s, x_scaler, y_mean, y_scale,
                 support_vectors, dual_coef, bias, gamma, n_iter=0, violation=0.0, objective=None):
        self.spec = spec
        self.columns = tuple(columns)
        self.horizon_steps = horizon_steps
        self.step_s = step_s
        self.x_scaler = x_scaler
        self.y_mean = float(y_mean)
        self.y_scale = float(y_scale)
        self.support_vectors = np.asarray(support_vectors, dtype=np.float64).reshape(-1, len(self.columns))
        self.dual_coef = np.asarray(dual_coef, dtype=np.float64)
        self.bias = float(bias)
        self.gamma = float(gamma)
        self.n_iter = n_iter
        self.violation = violation
        self.objective = objective

    @property
    def n_support(self) -> int:
        return self.dual_coef.size

    def decision_function(self, Z: np.ndarray) -> np.ndarray:
        """Standardised-unit output ``sum_i coef_i k(sv_i, z) + b`` for standardised rows."""
        if self.n_support == 0:
            return np.full(Z.shape[0], self.bias)
        out = np.empty(Z.shape[0])
        for lo in range(0, Z.shape[0], 1024):
            K = rbf_kernel(Z[lo:lo + 1024], self.support_vectors, self.gamma)
            out[lo:lo + 1024] = K @ self.dual_coef + self.bias
        return out

    def predict_batch(self, X):
        Z = self.x_scaler.transform(X)
        return self.y_mean + self.y_scale * self.decision_function(Z)


def fit_svr(spec: SVRSpec, train: SupervisedSet, record_objective: bool = False) -> SVRModel:
    if len(train) == 0:
        raise ValueError("empty training set")
    x_scaler = Standardizer.fit(train.X)
    Z = np.ascontiguousarray(x_scaler.transform(train.X))
    y_mean = float(train.y.mean())
    y_scale = float(train.y.std())
    if y_scale <= 1e-12 * max(1.0, abs(y_mean)):
        y_scale = 1.0
    yz = (train.y - y_mean) / y_scale
    n, d = Z.shape
    gamma = spec.gamma if spec.gamma is not None else 1.0 / d
    cache_rows = int(min(n, max(2, spec.cache_mb * 2 ** 20 // (8 * n))))
    beta, G, n_iter, violation, rho, trace = _smo(Z, yz, float(spec.C), float(spec.epsilon), float(gamma),
                                                 float(spec.tol), int(spec.max_iter), cache_rows,
                                                 record_objective)
    if violation > spec.tol:
        raise ConvergenceError(f"SMO stopped after {n_iter} iterations with KKT violation {violation:.3g}",
                               violation)
    coef = beta[:n] - beta[n:]
    sv = coef != 0
    model = SVRModel(spec, train.columns, train.horizon_steps, train.step_s, x_scaler, y_mean, y_scale,
                     Z[sv], coef[sv], -rho, gamma, n_iter, violation,
                     trace if record_objective else None)
    model.dual = (beta, G)
    return model
