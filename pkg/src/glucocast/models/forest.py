"""Random-forest regression built from CART trees.

Each tree is grown on a bootstrap sample; at every node up to ``mtry``
non-constant candidate columns are drawn at random and the split maximising
the reduction in squared error is taken, subject to ``min_leaf`` rows per
child. Trees are stored as flat arrays (feature, threshold, left, right,
value); leaves have feature -1.

Tree ``i`` draws all its randomness from a seed derived from
``(spec.seed, i)`` and trees are independent, so forests are identical for
any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numba
import numpy as np

from .. import _seeds
from ..series import SupervisedSet
from .base import RFSpec, RegressionModel

_U = numba.uint64


@numba.njit(cache=True, nogil=True)
def _next(state):
    # splitmix64
    state[0] += _U(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> _U(30))) * _U(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U(27))) * _U(0x94D049BB133111EB)
    return z ^ (z >> _U(31))


@numba.njit(cache=True, nogil=True)
def _below(state, n):
    return np.int64(_next(state) % _U(n))


@numba.njit(cache=True, nogil=True)
def _build_tree(X, y, sample, global_order, mtry, min_leaf, max_depth, seed):
    # sample must be sorted; global_order[f] is the argsort of column f over all rows
    n_samples = sample.shape[0]
    n_features = X.shape[1]
    cap = 2 * n_samples + 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)

    # feature-major copy of the sample; orders[f, lo:hi] lists a node's rows sorted by feature f
    xs = np.empty((n_features, n_samples))
    ys = np.empty(n_samples)
    for k in range(n_samples):
        ys[k] = y[sample[k]]
        for f in range(n_features):
            xs[f, k] = X[sample[k], f]
    n_rows = X.shape[0]
    first = np.full(n_rows, -1, dtype=np.int64)
    count = np.zeros(n_rows, dtype=np.int64)
    for k in range(n_samples):
        if first[sample[k]] < 0:
            first[sample[k]] = k
        count[sample[k]] += 1
    orders = np.empty((n_features, n_samples), dtype=np.int32)
    for f in range(n_features):
        pos = 0
        for k in range(n_rows):
            r = global_order[f, k]
            for c in range(count[r]):
                orders[f, pos] = first[r] + c
                pos += 1
    goes_left = np.zeros(n_samples, dtype=np.int64)
    buf = np.empty(n_samples, dtype=np.int32)
    buf_r = np.empty(n_samples, dtype=np.int32)
    feats = np.arange(n_features)
    state = np.empty(1, dtype=np.uint64)
    state[0] = _U(seed)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n_samples
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        m = hi - lo

        total = 0.0
        for k in range(lo, hi):
            total += ys[orders[0, k]]
        mean = total / m
        value[node] = mean
        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        sse = 0.0
        for k in range(lo, hi):
            dlt = ys[orders[0, k]] - mean
            sse += dlt * dlt
        if sse <= 1e-12 * (1.0 + abs(mean)) * m:
            continue

        # with targets centred on the node mean the right-hand sum is -s_left
        best_score = 0.0
        best_f = -1
        best_thr = 0.0
        best_left = 0
        visited = 0
        k_f = 0
        while k_f < n_features and visited < mtry:
            j = k_f + _below(state, n_features - k_f)
            tmp = feats[k_f]
            feats[k_f] = feats[j]
            feats[j] = tmp
            f = feats[k_f]
            k_f += 1
            if xs[f, orders[f, lo]] == xs[f, orders[f, hi - 1]]:
                continue
            visited += 1
            s_left = 0.0
            for k in range(lo, lo + min_leaf - 1):
                s_left += ys[orders[f, k]] - mean
            for k in range(lo + min_leaf - 1, hi - min_leaf):
                s_left += ys[orders[f, k]] - mean
                a = xs[f, orders[f, k]]
                b = xs[f, orders[f, k + 1]]
                if a == b:
                    continue
                nl = k + 1 - lo
                score = s_left * s_left / nl + s_left * s_left / (m - nl)
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_left = nl
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr
        if best_f < 0 or best_score <= 1e-12 * sse:
            continue

        for k in range(lo, hi):
            goes_left[orders[best_f, k]] = 1 if k - lo < best_left else 0
        for f in range(n_features):
            if f == best_f:
                continue
            a_pos = 0
            b_pos = 0
            for k in range(lo, hi):
                r = orders[f, k]
                g = goes_left[r]
                buf[a_pos] = r
                buf_r[b_pos] = r
                a_pos += g
                b_pos += 1 - g
            for k in range(a_pos):
                orders[f, lo + k] = buf[k]
            for k in range(b_pos):
                orders[f, lo + a_pos + k] = buf_r[k]

        feature[node] = best_f
        threshold[node] = best_thr
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        # right pushed first so the left subtree is numbered first
        stack_node[top] = r_node
        stack_lo[top] = lo + best_left
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = l_node
        stack_lo[top] = lo
        stack_hi[top] = lo + best_left
        stack_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _predict_forest(X, offsets, feature, threshold, left, right, value):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[i] = acc / n_trees
    return out


class Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def __eq__(self, other):
        return isinstance(other, Tree) and all(
            np.array_equal(getattr(self, a), getattr(other, a)) for a in self.__slots__)


def column_orders(X: np.ndarray) -> np.ndarray:
    """Stable argsort of every column, shape ``(n_features, n_rows)``."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))


def grow_tree(X, y, spec: RFSpec, tree_index: int, orders=None) -> Tree:
    seed = _seeds.derive_int(spec.seed, tree_index)
    n, p = X.shape
    if orders is None:
        orders = column_orders(X)
    if spec.bootstrap:
        sample = np.sort(np.random.default_rng(seed).integers(0, n, n))
    else:
        sample = np.arange(n, dtype=np.int64)
    mtry = spec.mtry or max(1, math.ceil(p / 3))
    max_depth = -1 if spec.max_depth is None else spec.max_depth
    arrays = _build_tree(X, y, sample.astype(np.int64), orders, min(mtry, p), spec.min_leaf, max_depth, seed)
    return Tree(*arrays)


class ForestModel(RegressionModel):
    def __init__(self, spec, columns, horizon_steps, step_s, trees):
        self.spec = spec
        self.columns = tuple(columns)
        self.horizon_steps = horizon_steps
        self.step_s = step_s
        self.trees = list(trees)
        sizes = np.array([t.n_nodes for t in self.trees])
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cat = lambda a: np.concatenate([getattr(t, a) for t in self.trees])
        self._flat = tuple(cat(a) for a in Tree.__slots__)

    def predict_batch(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_forest(X, self._offsets, *self._flat)


def fit_forest(spec: RFSpec, train: SupervisedSet, workers: int | None = None) -> ForestModel:
    if len(train) == 0:
        raise ValueError("empty training set")
    X = np.ascontiguousarray(train.X)
    y = np.ascontiguousarray(train.y)
    workers = max(1, workers or spec.workers)
    orders = column_orders(X)
    if workers == 1:
        trees = [grow_tree(X, y, spec, i, orders) for i in range(spec.n_trees)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(lambda i: grow_tree(X, y, spec, i, orders), range(spec.n_trees)))
    return ForestModel(spec, train.columns, train.horizon_steps, train.step_s, trees)
