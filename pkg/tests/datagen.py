"""Deterministic test inputs built with plain numpy, shared by the tests and the oracle generator."""

import numpy as np

T0 = 1_614_556_800  # 2021-03-01T00:00:00Z


def ar1(seed, n=2000, phi=0.6, burn=200):
    r = np.random.default_rng(seed)
    e = r.normal(size=n + burn)
    x = np.zeros(n + burn)
    for t in range(1, n + burn):
        x[t] = phi * x[t - 1] + e[t]
    return x[burn:]


def heart_rate_minutes(seed=0):
    r = np.random.default_rng(seed)
    times = T0 + 60 * np.arange(1440)
    values = 70 + 10 * r.standard_normal(1440)
    return times, values


def planted(seed, n=500, max_lag=15, noise=0.5):
    """y = 2 glucose(t-1) - carbs(t-2) + noise with lags 1..max_lag of both inputs as candidates."""
    r = np.random.default_rng(seed)
    m = n + max_lag
    g = np.zeros(m)
    e = r.normal(size=m)
    for t in range(1, m):
        g[t] = 0.8 * g[t - 1] + e[t]
    c = r.normal(size=m)
    t = np.arange(max_lag, m)
    names = [("glucose", k) for k in range(1, max_lag + 1)] + [("carbs", k) for k in range(1, max_lag + 1)]
    X = np.column_stack([(g if v == "glucose" else c)[t - k] for v, k in names])
    y = 2 * g[t - 1] - c[t - 2] + noise * r.normal(size=t.size)
    return names, X, y, T0 + 300 * t


def svr_problem(seed, n=200, d=3):
    r = np.random.default_rng(seed)
    X = r.uniform(-2, 2, size=(n, d))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2 - X[:, 2] + 0.1 * r.normal(size=n)
    return X, y


def sin_problem(seed, n=1000):
    r = np.random.default_rng(seed)
    x = r.uniform(-2, 2, size=n)
    y = np.sin(3 * x) + 0.1 * r.normal(size=n)
    return x[:, None], y


def bolus_events(seed, n=40, span_s=86_400, max_dose=6.0):
    r = np.random.default_rng(seed)
    t = np.sort(r.choice(np.arange(0, span_s, 60), size=n, replace=False)) + T0
    d = np.round(r.uniform(0.1, max_dose, size=n), 2)
    return t, d
