"""Deviance-minimizing binary regression trees.

Trees are grown greedily with one-step lookahead: every node tries all
admissible splits of every covariate and keeps the one with the largest
reduction in the sum of squared deviations. Missing covariate values never
take part in evaluating a split; they follow the child that received more
non-missing training units (ties go left). Categorical labels that a node
never saw in training are routed the same way.

The growing and routing loops are compiled with numba; :class:`Tree` holds
the flat node arrays and :class:`RegressionTree` wraps them in the usual
estimator interface.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import CATEGORICAL, CONTINUOUS
from .exceptions import DegenerateInput, DimensionMismatch, SchemaMismatch

MAX_CATEGORIES = 63
EXHAUSTIVE_CATEGORIES = 12
REL_TOL = 1e-10
_TIE_EPS = 1e-12


@njit(cache=True)
def _better(g, best):
    return g > best + _TIE_EPS * abs(best)


@njit(cache=True)
def _best_ordered(order, X, j, y, minbucket):
    """Best threshold split of covariate ``j``; ``order`` is sorted by it, NaNs last."""
    m = 0
    total = 0.0
    while m < order.shape[0] and not np.isnan(X[order[m], j]):
        total += y[order[m]]
        m += 1
    if m < 2:
        return -1.0, 0.0, 0, m
    mu = total / m
    total = 0.0
    for k in range(m):
        total += y[order[k]] - mu
    base = total * total / m
    best = -1.0
    thr = 0.0
    n_left = 0
    sl = 0.0
    for k in range(m - 1):
        sl += y[order[k]] - mu
        a = X[order[k], j]
        b = X[order[k + 1], j]
        if a == b:
            continue
        nl = k + 1
        if nl < minbucket or m - nl < minbucket:
            continue
        sr = total - sl
        g = sl * sl / nl + sr * sr / (m - nl) - base
        if _better(g, best):
            best = g
            thr = 0.5 * (a + b)
            n_left = nl
    return best, thr, n_left, m


@njit(cache=True)
def _best_categorical(order, X, j, y, ncat, minbucket):
    """Best subset split of categorical covariate ``j``.

    The left child always holds the smallest label present in the node.
    Up to EXHAUSTIVE_CATEGORIES labels every subset is tried; beyond that
    labels are ordered by mean response and only prefixes are scanned.
    """
    cnt = np.zeros(ncat)
    sm = np.zeros(ncat)
    m = 0
    total = 0.0
    for i in order:
        v = X[i, j]
        if np.isnan(v):
            continue
        m += 1
        total += y[i]
    seen = np.int64(0)
    if m < 2:
        return -1.0, np.int64(0), seen, 0, m
    mu = total / m
    for i in order:
        v = X[i, j]
        if np.isnan(v):
            continue
        c = int(v)
        cnt[c] += 1.0
        sm[c] += y[i] - mu
    present = np.nonzero(cnt)[0]
    L = present.shape[0]
    for c in present:
        seen |= np.int64(1) << c
    if L < 2:
        return -1.0, np.int64(0), seen, 0, m
    total = sm.sum()
    base = total * total / m
    best = -1.0
    best_mask = np.int64(0)
    best_nl = 0
    if L <= EXHAUSTIVE_CATEGORIES:
        for sub in range((1 << (L - 1)) - 1):
            mask = np.int64(1) << present[0]
            nl = cnt[present[0]]
            sl = sm[present[0]]
            for b in range(L - 1):
                if (sub >> b) & 1:
                    c = present[b + 1]
                    mask |= np.int64(1) << c
                    nl += cnt[c]
                    sl += sm[c]
            if nl < minbucket or m - nl < minbucket:
                continue
            sr = total - sl
            g = sl * sl / nl + sr * sr / (m - nl) - base
            if _better(g, best):
                best = g
                best_mask = mask
                best_nl = int(nl)
    else:
        means = sm[present] / cnt[present]
        ordered = present[np.argsort(means, kind="mergesort")]
        mask = np.int64(0)
        nl = 0.0
        sl = 0.0
        for k in range(L - 1):
            c = ordered[k]
            mask |= np.int64(1) << c
            nl += cnt[c]
            sl += sm[c]
            if nl < minbucket or m - nl < minbucket:
                continue
            sr = total - sl
            g = sl * sl / nl + sr * sr / (m - nl) - base
            if _better(g, best):
                best = g
                best_mask = mask
                best_nl = int(nl)
        if not (best_mask >> present[0]) & 1:
            best_mask = seen & ~best_mask
            best_nl = m - best_nl
    return best, best_mask, seen, best_nl, m


@njit(cache=True)
def _goes_left(v, is_cat, thr, lmask, smask, miss_left):
    if np.isnan(v):
        return miss_left
    if is_cat:
        c = np.int64(v)
        if c < 0 or c > 62 or not (smask >> c) & 1:
            return miss_left
        return (lmask >> c) & 1 == 1
    return v <= thr


@njit(cache=True)
def _grow(X, y, kind_code, ncat, minsplit, minbucket):
    n, p = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    lmask = np.zeros(cap, np.int64)
    smask = np.zeros(cap, np.int64)
    miss_left = np.zeros(cap, np.bool_)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    leaf_id = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    var = np.zeros(cap)
    gain = np.zeros(cap)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    train_leaf = np.empty(n, np.int64)
    goes = np.zeros(n, np.bool_)
    buf = np.empty(n, np.int64)

    # per-feature orderings (NaN last, ties by index); every node owns the
    # same [start, end) slice in each row, kept sorted by stable partitioning
    sidx = np.empty((p, n), np.int64)
    for j in range(p):
        sidx[j] = np.argsort(X[:, j], kind="mergesort")

    mu0 = y.mean()
    tol = REL_TOL * ((y - mu0) ** 2).sum()

    end[0] = n
    n_nodes = 1
    n_leaves = 0
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = end[node]
        m = e - s
        rows = sidx[0, s:e]
        tot = 0.0
        lo = np.inf
        hi = -np.inf
        for i in rows:
            tot += y[i]
            lo = min(lo, y[i])
            hi = max(hi, y[i])
        mu = tot / m
        value[node] = mu
        count[node] = m
        if m > 1:
            ss = 0.0
            for i in rows:
                ss += (y[i] - mu) ** 2
            var[node] = ss / (m - 1)

        best = -1.0
        bj = -1
        bthr = 0.0
        bl = np.int64(0)
        bs = np.int64(0)
        bnl = 0
        bnn = 0
        if m >= minsplit and hi != lo:
            for j in range(p):
                order = sidx[j, s:e]
                if kind_code[j] == 1:
                    g, mask, seen, nl, nn = _best_categorical(order, X, j, y, ncat[j], minbucket)
                    thr = 0.0
                else:
                    g, thr, nl, nn = _best_ordered(order, X, j, y, minbucket)
                    mask = np.int64(0)
                    seen = np.int64(0)
                if g > tol and _better(g, best):
                    best = g
                    bj = j
                    bthr = thr
                    bl = mask
                    bs = seen
                    bnl = nl
                    bnn = nn

        if bj < 0:
            leaf_id[node] = n_leaves
            for i in rows:
                train_leaf[i] = n_leaves
            n_leaves += 1
            continue

        feature[node] = bj
        threshold[node] = bthr
        lmask[node] = bl
        smask[node] = bs
        miss_left[node] = bnl >= bnn - bnl
        gain[node] = best
        is_cat = kind_code[bj] == 1
        n_left = 0
        for i in rows:
            g_l = _goes_left(X[i, bj], is_cat, bthr, bl, bs, miss_left[node])
            goes[i] = g_l
            if g_l:
                n_left += 1
        for j in range(p):
            a = s
            b = 0
            for k in range(s, e):
                i = sidx[j, k]
                if goes[i]:
                    sidx[j, a] = i
                    a += 1
                else:
                    buf[b] = i
                    b += 1
            sidx[j, a:e] = buf[:b]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        end[lc] = s + n_left
        start[rc] = s + n_left
        end[rc] = e
        stack[top] = rc
        stack[top + 1] = lc
        top += 2

    return (feature[:n_nodes], threshold[:n_nodes], lmask[:n_nodes], smask[:n_nodes],
            miss_left[:n_nodes], left[:n_nodes], right[:n_nodes], leaf_id[:n_nodes],
            value[:n_nodes], count[:n_nodes], var[:n_nodes], gain[:n_nodes],
            train_leaf, n_leaves)


@njit(cache=True)
def _apply(X, feature, threshold, lmask, smask, miss_left, is_cat, left, right, leaf_id):
    n = X.shape[0]
    out = np.empty(n, np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            f = feature[node]
            if _goes_left(X[i, f], is_cat[node], threshold[node], lmask[node],
                          smask[node], miss_left[node]):
                node = left[node]
            else:
                node = right[node]
        out[i] = leaf_id[node]
    return out


# -- public node view ----------------------------------------------------------

@dataclass(frozen=True)
class SplitRule:
    covariate_index: int
    threshold: Union[float, None]      # set for ordered covariates
    category_subset: Union[frozenset, None]  # labels (codes) sent left
    missing_direction: str             # "left" or "right"


@dataclass(frozen=True)
class Leaf:
    leaf_id: int
    training_count: int
    mean: float


@dataclass(frozen=True)
class Internal:
    rule: SplitRule
    left: object
    right: object


def _kind_codes(kinds, p):
    if kinds is None:
        return np.zeros(p, np.int64)
    if len(kinds) != p:
        raise DimensionMismatch(f"{len(kinds)} kinds for {p} covariates")
    return np.array([1 if k == CATEGORICAL else 0 for k in kinds], np.int64)


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat array representation of a grown tree.

    Node 0 is the root; ``feature[k] == -1`` marks a leaf whose id is
    ``leaf_id[k]``. Per-leaf training statistics are indexed by leaf id.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left_mask: np.ndarray
    seen_mask: np.ndarray
    missing_left: np.ndarray
    is_categorical: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    value: np.ndarray
    count: np.ndarray
    variance: np.ndarray
    gain: np.ndarray
    train_leaf: np.ndarray
    n_leaves: int
    n_features: int
    minsplit: int
    minbucket: int = 1

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def _leaf_nodes(self):
        nodes = np.flatnonzero(self.feature < 0)
        return nodes[np.argsort(self.leaf_id[nodes])]

    @property
    def leaf_value(self):
        return self.value[self._leaf_nodes]

    @property
    def leaf_count(self):
        return self.count[self._leaf_nodes]

    @property
    def leaf_variance(self):
        return self.variance[self._leaf_nodes]

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise SchemaMismatch(f"expected {self.n_features} covariates, got {X.shape[1]}")
        return _apply(np.ascontiguousarray(X), self.feature, self.threshold, self.left_mask,
                      self.seen_mask, self.missing_left, self.is_categorical, self.left,
                      self.right, self.leaf_id)

    def predict(self, X):
        return self.leaf_value[self.apply(X)]

    @property
    def root(self):
        return self._node(0)

    def _node(self, k):
        if self.feature[k] < 0:
            return Leaf(int(self.leaf_id[k]), int(self.count[k]), float(self.value[k]))
        direction = "left" if self.missing_left[k] else "right"
        if self.is_categorical[k]:
            subset = frozenset(c for c in range(MAX_CATEGORIES) if (self.left_mask[k] >> c) & 1)
            rule = SplitRule(int(self.feature[k]), None, subset, direction)
        else:
            rule = SplitRule(int(self.feature[k]), float(self.threshold[k]), None, direction)
        return Internal(rule, self._node(self.left[k]), self._node(self.right[k]))

    def dump(self, names=None):
        """Indented plain-text rendering, one rule or leaf per line."""
        lines = []

        def walk(k, depth):
            pad = "  " * depth
            if self.feature[k] < 0:
                lines.append(f"{pad}leaf {self.leaf_id[k]}: n={self.count[k]} "
                             f"mean={self.value[k]:.6g}")
                return
            j = int(self.feature[k])
            name = names[j] if names else f"x{j}"
            miss = "L" if self.missing_left[k] else "R"
            if self.is_categorical[k]:
                cats = [c for c in range(MAX_CATEGORIES) if (self.left_mask[k] >> c) & 1]
                cond = f"{name} in {cats}"
            else:
                cond = f"{name} <= {self.threshold[k]:.6g}"
            lines.append(f"{pad}{cond} (missing->{miss}, n={self.count[k]})")
            walk(self.left[k], depth + 1)
            walk(self.right[k], depth + 1)

        walk(0, 0)
        return "\n".join(lines)


def grow(X, y, minsplit, kinds=None, minbucket=1):
    """Grow a regression tree on ``X`` (NaN = missing) with response ``y``.

    ``kinds`` lists each column's kind; categorical columns must hold integer
    codes ``0..62``. Nodes with fewer than ``minsplit`` rows are not split,
    and a split is admissible only if both children receive at least
    ``minbucket`` of the rows that are non-missing on the split covariate.
    """
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    if X.ndim != 2:
        raise DimensionMismatch("covariates must be a 2-D array")
    if X.shape[0] == 0:
        raise DegenerateInput("cannot grow a tree on zero rows")
    if y.shape != (X.shape[0],):
        raise DimensionMismatch(f"response length {y.shape} does not match {X.shape[0]} rows")
    if minsplit < 2:
        raise ValueError("minsplit must be at least 2")
    if minbucket < 1:
        raise ValueError("minbucket must be at least 1")
    if not np.all(np.isfinite(y)):
        raise ValueError("response must be finite")
    p = X.shape[1]
    kind_code = _kind_codes(kinds, p)
    ncat = np.ones(p, np.int64)
    for j in np.flatnonzero(kind_code):
        col = X[:, j]
        col = col[~np.isnan(col)]
        if len(col) and (col.min() < 0 or col.max() >= MAX_CATEGORIES or np.any(col != np.round(col))):
            raise ValueError(f"categorical column {j} must hold codes 0..{MAX_CATEGORIES - 1}")
        ncat[j] = int(col.max()) + 1 if len(col) else 1
    (feature, threshold, lmask, smask, miss, left, right, leaf_id, value, count, var,
     gain, train_leaf, n_leaves) = _grow(X, y, kind_code, ncat, int(minsplit),
                                          int(minbucket))
    is_cat = np.zeros(len(feature), np.bool_)
    internal = feature >= 0
    is_cat[internal] = kind_code[feature[internal]] == 1
    return Tree(feature, threshold, lmask, smask, miss, is_cat, left, right, leaf_id, value,
                count, var, gain, train_leaf, int(n_leaves), p, int(minsplit), int(minbucket))


def classify(tree, x):
    """Leaf id reached by a single covariate vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != tree.n_features:
        raise SchemaMismatch(f"expected a vector of {tree.n_features} covariates")
    return int(tree.apply(x[None, :])[0])


def predict_mean(tree, x):
    """Training response mean of the leaf ``x`` falls into."""
    return float(tree.leaf_value[classify(tree, x)])


class RegressionTree(RegressorMixin, BaseEstimator):
    """Regression tree estimator with missing-value routing.

    Parameters
    ----------
    minsplit : int, default=20
        Smallest node size at which a split is attempted.
    covariate_kinds : sequence of str, optional
        Kind of each column (``continuous``, ``binary`` or ``categorical``).
        Defaults to all ordered.
    """

    def __init__(self, minsplit=20, covariate_kinds=None):
        self.minsplit = minsplit
        self.covariate_kinds = covariate_kinds

    def fit(self, X, y):
        X = check_array(X, ensure_all_finite="allow-nan", dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if len(y) != len(X):
            raise DimensionMismatch("X and y have different lengths")
        kinds = self.covariate_kinds
        if kinds is not None:
            kinds = [CATEGORICAL if k == CATEGORICAL else CONTINUOUS for k in kinds]
        self.tree_ = grow(X, y, self.minsplit, kinds)
        self.n_features_in_ = X.shape[1]
        self.n_leaves_ = self.tree_.n_leaves
        return self

    def apply(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, ensure_all_finite="allow-nan", dtype=float)
        return self.tree_.apply(X)

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, ensure_all_finite="allow-nan", dtype=float)
        return self.tree_.predict(X)
