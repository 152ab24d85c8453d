"""Independent reference values, written to ``frozen.json``.

Nothing here imports glucocast: every value is recomputed from first
principles (explicit loops, scipy quadrature, closed-form least squares) on
inputs from ``tests/datagen.py``. Run from the repository root:

    python3 tests/oracles/generate.py
"""

import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np
from scipy.integrate import quad

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import datagen  # noqa: E402


def heart_rate_bins():
    times, values = datagen.heart_rate_minutes(0)
    out = []
    for b in range(288):
        members = [v for t, v in zip(times, values) if datagen.T0 + 300 * b <= t < datagen.T0 + 300 * (b + 1)]
        out.append(sum(members) / len(members))
    return out


def bolus_bin_sums():
    times, doses = datagen.bolus_events(3, n=30)
    sums = [0.0] * 288
    for t, d in zip(times, doses):
        sums[int((t - datagen.T0) // 300)] += float(d)
    return sums


def gap_runs():
    """[a..., 5 gaps, b...] with max_gap 3 -> two segments; and one mixed series."""
    v = [1.0, 2.0, 3.0] + [None] * 5 + [4.0, 5.0]
    mixed = [10.0, None, 30.0, None, None, None, None, 80.0, 90.0, None, None, 120.0]
    return {"five_gaps": v, "mixed": mixed, "mixed_segments": _segments(mixed, 3)}


def _segments(v, max_gap):
    # scan runs of gaps; interpolate short interior runs, split at long ones
    filled = list(v)
    i = 0
    while i < len(v):
        if v[i] is None:
            j = i
            while j < len(v) and v[j] is None:
                j += 1
            if 0 < i and j < len(v) and j - i <= max_gap:
                a, b = v[i - 1], v[j]
                for k in range(i, j):
                    filled[k] = a + (b - a) * (k - i + 1) / (j - i + 1)
            i = j
        else:
            i += 1
    segs, cur, start = [], [], None
    for k, x in enumerate(filled):
        if x is None:
            if cur:
                segs.append([start, cur])
            cur, start = [], None
        else:
            if not cur:
                start = k
            cur.append(x)
    if cur:
        segs.append([start, cur])
    return segs


def _biexp_activity(duration, peak):
    mass = quad(lambda s: s * math.exp(-s / peak), 0, duration, limit=200)[0]
    return lambda s: s * math.exp(-s / peak) / mass if 0 <= s < duration else 0.0


def kernel_quadrature():
    """Remaining fraction as 1 - integral of activity, for the default kernels."""
    out = {}
    for name, dur, peak in (("insulin", 5 * 3600, 75 * 60), ("carbs", 3 * 3600, 45 * 60)):
        a = _biexp_activity(dur, peak)
        ages = [0, 600, 1800, 3600, 4500, 7200, 10800, dur - 60, dur]
        out[name] = {"ages": ages, "remaining": [1 - quad(a, 0, t, limit=200)[0] for t in ages]}
    dur = 8 * 3600
    ages = [0, 3600, 14400, 28000, dur]
    out["exercise"] = {"ages": ages, "remaining": [1 - quad(lambda s: 1 / dur, 0, t)[0] for t in ages]}
    return out


def onboard_bruteforce():
    """OB(t) = sum_i d_i r(t - t_i) by explicit loops for two event sets on a 1-day grid."""
    dur, peak = 5 * 3600, 75 * 60
    mass = 1 - math.exp(-dur / peak) * (1 + dur / peak)
    r = lambda age: 0.0 if age >= dur else 1 - (1 - math.exp(-age / peak) * (1 + age / peak)) / mass
    t1, d1 = datagen.bolus_events(11, n=6)
    grid = [datagen.T0 + 300 * i for i in range(288)]
    ob = []
    for g in grid:
        ob.append(sum(float(d) * r(g - t) for t, d in zip(t1, d1) if t <= g))
    return {"ob": ob}


def ar1_ols():
    """Closed-form AR(1)-with-intercept least squares for seeds 0..19."""
    out = []
    for seed in range(20):
        x = datagen.ar1(seed)
        a, b = x[1:], x[:-1]
        bm, am = b.mean(), a.mean()
        phi = float(((b - bm) * (a - am)).sum() / ((b - bm) ** 2).sum())
        c = float(am - phi * bm)
        out.append({"seed": seed, "phi": phi, "c": c})
    return out


def rmse_two_pass():
    r = np.random.default_rng(42)
    cases = []
    for n in (1, 7, 100, 1000):
        p, a = r.normal(100, 30, n), r.normal(100, 30, n)
        s = 0.0
        for i in range(n):
            s += (float(p[i]) - float(a[i])) ** 2
        m = 0.0
        for i in range(n):
            m += abs(float(p[i]) - float(a[i]))
        cases.append({"n": n, "seed_offset": len(cases), "rmse": math.sqrt(s / n), "mae": m / n,
                      "pred": p.tolist(), "actual": a.tolist()})
    return cases


def subset_oracle():
    """Best subsets of size <= 2 by mean validation MSE of OLS over fixed random splits."""
    out = []
    for seed in range(20):
        names, X, y, _ = datagen.planted(seed)
        n, p = X.shape
        r = np.random.default_rng(10_000 + seed)
        splits = [r.permutation(n) for _ in range(10)]
        n_tr = int(0.7 * n)

        def cv_mse(cols):
            tot = 0.0
            for perm in splits:
                tr, va = perm[:n_tr], perm[n_tr:]
                A = np.column_stack([np.ones(tr.size)] + [X[tr, c] for c in cols])
                w = np.linalg.lstsq(A, y[tr], rcond=None)[0]
                B = np.column_stack([np.ones(va.size)] + [X[va, c] for c in cols])
                tot += float(np.mean((y[va] - B @ w) ** 2))
            return tot / len(splits)

        singles = sorted((cv_mse([c]), c) for c in range(p))
        pairs = sorted((cv_mse(list(pc)), pc) for pc in itertools.combinations(range(p), 2))
        best_pair = pairs[0][1]
        out.append({"seed": seed, "best_pair": [list(names[c]) for c in best_pair], "best_pair_mse": pairs[0][0],
                    "second_pair_mse": pairs[1][0], "best_single_mse": singles[0][0]})
    return out


def main():
    frozen = {
        "heart_rate_bins": heart_rate_bins(),
        "bolus_bin_sums": bolus_bin_sums(),
        "gap_runs": gap_runs(),
        "kernel_quadrature": kernel_quadrature(),
        "onboard_bruteforce": onboard_bruteforce(),
        "ar1_ols": ar1_ols(),
        "rmse": rmse_two_pass(),
        "subset_oracle": subset_oracle(),
    }
    (HERE / "frozen.json").write_text(json.dumps(frozen, indent=1) + "\n")


if __name__ == "__main__":
    main()
