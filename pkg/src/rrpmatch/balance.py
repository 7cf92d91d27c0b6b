"""Balancing and normality tests.

Welch's t and Pearson's chi-square decide whether a leaf is balanced; the
Shapiro-Wilk test (Royston's AS R94) checks normality of replication
estimates. ``leaves_balanced`` is the compiled batch version used inside the
replication loop; ``leaf_balanced`` is the readable single-leaf reference.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._special import chi2_sf, norm_ppf, norm_sf, t_sf2
from .dataset import CONTINUOUS
from .exceptions import InapplicableTest

DEFAULT_ALPHA = 0.005


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df_or_n: float

    __test__ = False  # keep pytest from collecting this class


def two_sample_t(xs, ys):
    """Welch's unequal-variance two-sample t test (two-sided)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n1, n2 = len(xs), len(ys)
    if n1 < 2 or n2 < 2:
        raise InapplicableTest("t test needs at least two observations per group")
    m1, m2 = xs.mean(), ys.mean()
    v1, v2 = xs.var(ddof=1), ys.var(ddof=1)
    if xs.min() == xs.max():
        v1 = 0.0
    if ys.min() == ys.max():
        v2 = 0.0
    if v1 == 0.0 and v2 == 0.0:
        if m1 == m2:
            raise InapplicableTest("both groups constant and equal")
        # constant, distinct groups: perfectly separated
        return TestResult(math.copysign(math.inf, m1 - m2), 0.0, float(n1 + n2 - 2))
    a, b = v1 / n1, v2 / n2
    t = (m1 - m2) / math.sqrt(a + b)
    df = (a + b) ** 2 / (a * a / (n1 - 1) + b * b / (n2 - 1))
    return TestResult(float(t), float(min(1.0, t_sf2(t, df))), float(df))


def chi_square_homogeneity(counts):
    """Pearson chi-square test of homogeneity on a 2 x k table, no continuity correction."""
    table = np.asarray(counts, dtype=float)
    if table.ndim != 2 or table.shape[0] != 2:
        raise ValueError("expected a 2 x k contingency table")
    table = table[:, table.sum(axis=0) > 0]
    rows = table.sum(axis=1)
    if table.shape[1] < 2 or np.any(rows < 1):
        raise InapplicableTest("fewer than two non-empty categories")
    expected = np.outer(rows, table.sum(axis=0)) / table.sum()
    stat = float(((table - expected) ** 2 / expected).sum())
    df = table.shape[1] - 1
    return TestResult(stat, float(min(1.0, chi2_sf(stat, df))), float(df))


# Royston (1995) AS R94 coefficients
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coef, x):
    return sum(c * x ** k for k, c in enumerate(coef))


def _swilk_coefficients(n):
    half = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    m = np.array([norm_ppf((i - 0.375) / (n + 0.25)) for i in range(1, half + 1)])
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(half)
    a[0] = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a[1] = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2)
                        / (1 - 2 * a[0] ** 2 - 2 * a[1] ** 2))
        first = 2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a[0] ** 2))
        first = 1
    a[first:] = -m[first:] / fac
    return a


def shapiro_wilk(values):
    """Shapiro-Wilk W and its p-value via Royston's AS R94 approximation.

    Valid for 3 <= n <= 5000.
    """
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    if n < 3 or n > 5000:
        raise InapplicableTest(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    rng = x[-1] - x[0]
    if not rng > 1e-19 * max(1.0, abs(x[0])):
        raise InapplicableTest("Shapiro-Wilk on constant data")
    a = _swilk_coefficients(n)
    half = len(a)
    xs = (x - x.mean()) / rng
    num = float(np.dot(a, xs[::-1][:half] - xs[:half]))
    w = num * num / float(np.dot(xs, xs))
    w = min(w, 1.0)

    if n == 3:
        p = 1.90985931710274 * (math.asin(math.sqrt(w)) - 1.04719755119660)
        return TestResult(w, min(1.0, max(p, 0.0)), 3.0)
    y = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return TestResult(w, 1e-99, float(n))
        y = -math.log(gamma - y)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    if y == -math.inf:
        return TestResult(w, 1.0, float(n))
    return TestResult(w, float(norm_sf((y - mean) / sd)), float(n))


def significance_marks(p):
    """Bullet notation: one mark below 0.05, two below 0.01, three below 0.001."""
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return ""
    return "*" * sum(p < lvl for lvl in (0.05, 0.01, 0.001))


def _is_continuous(kind):
    return kind == CONTINUOUS


def leaf_balanced(treated, controls, kinds, alpha=DEFAULT_ALPHA):
    """True when no covariate differs between the two groups at level ``alpha``.

    ``treated`` and ``controls`` are 2-D arrays of covariates (NaN = missing);
    ``kinds`` gives each column's kind. Continuous columns use Welch's t,
    binary and categorical ones the chi-square test; inapplicable tests count
    as balanced.
    """
    treated = np.atleast_2d(np.asarray(treated, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    for j, kind in enumerate(kinds):
        xt = treated[:, j]
        xc = controls[:, j]
        xt = xt[~np.isnan(xt)]
        xc = xc[~np.isnan(xc)]
        try:
            if _is_continuous(kind):
                res = two_sample_t(xt, xc)
            else:
                labels = np.union1d(xt, xc)
                table = [[np.sum(xt == v) for v in labels], [np.sum(xc == v) for v in labels]]
                res = chi_square_homogeneity(table) if len(labels) else None
                if res is None:
                    continue
        except InapplicableTest:
            continue
        if res.p_value < alpha:
            return False
    return True


# -- compiled batch path -------------------------------------------------------

def kind_codes(kinds):
    """0 for continuous columns (t test), 1 for binary/categorical (chi-square)."""
    return np.array([0 if _is_continuous(k) else 1 for k in kinds], dtype=np.int64)


def category_counts(X, kinds):
    """Number of category codes per column (0 for continuous columns)."""
    out = np.zeros(len(kinds), dtype=np.int64)
    for j, k in enumerate(kinds):
        if not _is_continuous(k):
            col = X[:, j]
            col = col[~np.isnan(col)]
            out[j] = int(col.max()) + 1 if len(col) else 1
    return out


@njit(cache=True)
def _welch_p(vals_t, vals_c):
    n1 = vals_t.shape[0]
    n2 = vals_c.shape[0]
    if n1 < 2 or n2 < 2:
        return 1.0
    m1 = vals_t.mean()
    m2 = vals_c.mean()
    v1 = 0.0
    v2 = 0.0
    if vals_t.min() != vals_t.max():
        v1 = ((vals_t - m1) ** 2).sum() / (n1 - 1)
    if vals_c.min() != vals_c.max():
        v2 = ((vals_c - m2) ** 2).sum() / (n2 - 1)
    if v1 == 0.0 and v2 == 0.0:
        return 1.0 if m1 == m2 else 0.0
    a = v1 / n1
    b = v2 / n2
    t = (m1 - m2) / math.sqrt(a + b)
    df = (a + b) ** 2 / (a * a / (n1 - 1) + b * b / (n2 - 1))
    return t_sf2(t, df)


@njit(cache=True)
def _chi2_p(codes_t, codes_c, ncat):
    ct = np.zeros(ncat)
    cc = np.zeros(ncat)
    for v in codes_t:
        ct[int(v)] += 1.0
    for v in codes_c:
        cc[int(v)] += 1.0
    rt = ct.sum()
    rc = cc.sum()
    if rt < 1 or rc < 1:
        return 1.0
    total = rt + rc
    k = 0
    stat = 0.0
    for q in range(ncat):
        col = ct[q] + cc[q]
        if col == 0:
            continue
        k += 1
        et = rt * col / total
        ec = rc * col / total
        stat += (ct[q] - et) ** 2 / et + (cc[q] - ec) ** 2 / ec
    if k < 2:
        return 1.0
    return chi2_sf(stat, k - 1)


@njit(cache=True)
def _nonmissing(v):
    return v[~np.isnan(v)]


@njit(cache=True)
def leaves_balanced(XT, leaf_t, XC, leaf_c, n_leaves, kind_code, ncat, alpha):
    """Balance verdict for every leaf holding at least one unit of each group.

    Returns a boolean array of length ``n_leaves``; leaves lacking either
    group are reported False (nothing to match).
    """
    p = XT.shape[1]
    cnt_t = np.zeros(n_leaves, np.int64)
    cnt_c = np.zeros(n_leaves, np.int64)
    for l in leaf_t:
        cnt_t[l] += 1
    for l in leaf_c:
        cnt_c[l] += 1
    # bucket unit indices by leaf
    start_t = np.zeros(n_leaves + 1, np.int64)
    start_c = np.zeros(n_leaves + 1, np.int64)
    for l in range(n_leaves):
        start_t[l + 1] = start_t[l] + cnt_t[l]
        start_c[l + 1] = start_c[l] + cnt_c[l]
    idx_t = np.empty(leaf_t.shape[0], np.int64)
    idx_c = np.empty(leaf_c.shape[0], np.int64)
    fill_t = start_t[:-1].copy()
    fill_c = start_c[:-1].copy()
    for i in range(leaf_t.shape[0]):
        idx_t[fill_t[leaf_t[i]]] = i
        fill_t[leaf_t[i]] += 1
    for i in range(leaf_c.shape[0]):
        idx_c[fill_c[leaf_c[i]]] = i
        fill_c[leaf_c[i]] += 1

    out = np.zeros(n_leaves, np.bool_)
    for l in range(n_leaves):
        if cnt_t[l] == 0 or cnt_c[l] == 0:
            continue
        rows_t = idx_t[start_t[l]:start_t[l + 1]]
        rows_c = idx_c[start_c[l]:start_c[l + 1]]
        ok = True
        for j in range(p):
            vt = _nonmissing(XT[rows_t, j])
            vc = _nonmissing(XC[rows_c, j])
            if kind_code[j] == 0:
                pv = _welch_p(vt, vc)
            else:
                pv = _chi2_p(vt, vc, ncat[j])
            if pv < alpha:
                ok = False
                break
        out[l] = ok
    return out
