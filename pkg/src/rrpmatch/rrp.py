"""Random recursive partitioning: one replication and the replication driver.

A replication draws a random permutation of ``1..n`` as the response of the
grow group, grows a regression tree on it, drops the other group down the
tree and matches treated with controls inside every leaf that passes the
balance test. Treated left unmatched are retried with fresh trees until all
are matched or the iteration budget is spent.

Every replication owns the random stream ``default_rng([master_seed, k])``,
so results do not depend on execution order or on the number of workers.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .balance import DEFAULT_ALPHA, category_counts, kind_codes, leaves_balanced
from .cart import grow
from .exceptions import AllReplicationsFailed
from .estimators import (DENOMINATORS, VARIANCE_FORMS, att_adjusted, att_raw, fit_mu0,
                         variance_att, variance_att_adjusted)

logger = logging.getLogger(__name__)

GROW_MODES = ("treated", "controls")
REPLACEMENT = ("without", "with")
GROW_SETS = ("full", "residual")
BALANCE_SETS = ("leaf", "residual")


@dataclass(frozen=True)
class RrpConfig:
    """Settings of one replication run.

    Parameters
    ----------
    minsplit : int
        Smallest node size at which the permuted-label tree still splits.
    grow_on : {"treated", "controls"}
        Group the tree is grown on; the other group is dropped down it.
    replacement : {"without", "with"}
        Whether controls matched in one iteration stay available to later
        iterations of the same replication.
    denominator : {"matched", "all"}
        Divide replication estimates by the matched treated count or by n_T.
    variance_form : {"pooled", "literal"}
        Algebraic form of the plug-in variance, see :mod:`rrpmatch.estimators`.
    grow_set : {"full", "residual"}
        Every iteration regrows the tree on the whole grow group (``"full"``,
        a fresh permutation of ``1..n``) or only on its unmatched treated /
        eligible controls (``"residual"``). Only unmatched treated are
        matched either way.
    balance_on : {"leaf", "residual"}
        Units entering the balance test of a leaf: all treated in it, or
        only those still to be matched. Controls are always the eligible ones.
    minbucket : int or None
        Smallest admissible child size for the tree; ``None`` uses
        ``round(minsplit / 3)`` (at least 1).
    """

    minsplit: int = 50
    grow_on: str = "treated"
    max_iterations: int = 50
    alpha: float = DEFAULT_ALPHA
    replacement: str = "without"
    master_seed: int = 0
    replications: int = 250
    mu0_minsplit: int = 20
    denominator: str = "matched"
    variance_form: str = "pooled"
    grow_set: str = "full"
    balance_on: str = "leaf"
    minbucket: int = None

    @property
    def effective_minbucket(self):
        if self.minbucket is not None:
            return int(self.minbucket)
        return max(1, int(round(self.minsplit / 3)))

    def __post_init__(self):
        if int(self.minsplit) < 2:
            raise ValueError("minsplit must be at least 2")
        if self.grow_on not in GROW_MODES:
            raise ValueError(f"grow_on must be one of {GROW_MODES}")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be at least 1")
        if int(self.replications) < 1:
            raise ValueError("replications must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.replacement not in REPLACEMENT:
            raise ValueError(f"replacement must be one of {REPLACEMENT}")
        if self.denominator not in DENOMINATORS:
            raise ValueError(f"denominator must be one of {DENOMINATORS}")
        if self.variance_form not in VARIANCE_FORMS:
            raise ValueError(f"variance_form must be one of {VARIANCE_FORMS}")
        if self.balance_on not in BALANCE_SETS:
            raise ValueError(f"balance_on must be one of {BALANCE_SETS}")
        if self.minbucket is not None and int(self.minbucket) < 1:
            raise ValueError("minbucket must be at least 1")
        if self.grow_set not in GROW_SETS:
            raise ValueError(f"grow_set must be one of {GROW_SETS}")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be a non-negative 64-bit integer")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class MatchWeights:
    """Binary treated x control match matrix of one replication, stored by blocks.

    ``blocks`` is a tuple of ``(treated_idx, control_idx)`` pairs, one per
    balanced leaf; every treated of a block is matched to every control of it.
    A treated index appears in at most one block.
    """

    n_T: int
    n_C: int
    blocks: tuple

    @property
    def matched_treated(self):
        if not self.blocks:
            return np.empty(0, np.int64)
        return np.sort(np.concatenate([t for t, _ in self.blocks]))

    @property
    def matched_controls(self):
        if not self.blocks:
            return np.empty(0, np.int64)
        return np.unique(np.concatenate([c for _, c in self.blocks]))

    @property
    def n_treated_matched(self):
        return int(sum(len(t) for t, _ in self.blocks))

    @property
    def n_controls_matched(self):
        return len(self.matched_controls)

    def match_sets(self):
        """Mapping treated index -> sorted array of matched control indices."""
        out = {}
        for t, c in self.blocks:
            cs = np.sort(c)
            for i in t:
                out[int(i)] = cs
        return out

    def to_dense(self):
        W = np.zeros((self.n_T, self.n_C), np.int8)
        for t, c in self.blocks:
            W[np.ix_(t, c)] = 1
        return W

    def add_to(self, counts):
        """Add this matrix into an integer ``n_T x n_C`` array in place."""
        for t, c in self.blocks:
            counts[np.ix_(t, c)] += 1
        return counts


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    index: int
    weights: MatchWeights
    tau_k: float
    tau_k_adjusted: float
    sigma_k: float
    sigma_k_adjusted: float
    n_treated_matched: int
    n_controls_matched: int
    iterations_used: int

    @property
    def defined(self):
        return self.n_treated_matched > 0


def replication_rng(master_seed, k):
    """Independent random stream for replication ``k``."""
    return np.random.default_rng([int(master_seed), int(k)])


def permute_labels(n, rng):
    """Uniform random permutation of ``1..n`` as a float response vector."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return (rng.permutation(n) + 1).astype(float)


class _Problem:
    """Arrays shared by every replication of one run."""

    def __init__(self, sample, config, mu0=None):
        self.config = config
        self.XT = np.ascontiguousarray(sample.X_treated)
        self.XC = np.ascontiguousarray(sample.X_control)
        self.yT = np.asarray(sample.y_treated)
        self.yC = np.asarray(sample.y_control)
        self.kinds = sample.kinds
        self.kind_code = kind_codes(self.kinds)
        self.ncat = category_counts(sample.X, self.kinds)
        self.s2T = float(self.yT.var(ddof=1)) if len(self.yT) > 1 else 0.0
        self.s2C = float(self.yC.var(ddof=1)) if len(self.yC) > 1 else 0.0
        self.mu0 = mu0 if mu0 is not None else fit_mu0(sample, config.mu0_minsplit)


def _blocks(t_idx, leaf_t, c_idx, leaf_c, ok):
    """Group matched units of balanced leaves into (treated, controls) blocks."""
    keep_t = ok[leaf_t]
    keep_c = ok[leaf_c]
    t_idx, leaf_t = t_idx[keep_t], leaf_t[keep_t]
    c_idx, leaf_c = c_idx[keep_c], leaf_c[keep_c]
    ot = np.argsort(leaf_t, kind="stable")
    oc = np.argsort(leaf_c, kind="stable")
    leaves = np.flatnonzero(ok)
    ct = np.searchsorted(leaf_t[ot], leaves, side="right")
    cc = np.searchsorted(leaf_c[oc], leaves, side="right")
    st = np.r_[0, ct[:-1]]
    sc = np.r_[0, cc[:-1]]
    ts = t_idx[ot]
    cs = c_idx[oc]
    return [(ts[a:b], cs[c:d]) for a, b, c, d in zip(st, ct, sc, cc)]


def match_once(XT, t_idx, XC, c_idx, config, rng, kind_code, ncat, kinds=None):
    """One tree: grow, assign, test balance and match within leaves.

    ``t_idx`` selects the treated still to be matched and ``c_idx`` the
    controls still eligible (rows of ``XT``/``XC``). With
    ``config.grow_set == "full"`` the tree is grown on the whole grow group;
    with ``"residual"`` on its unmatched/eligible part only. With
    ``config.balance_on == "leaf"`` a leaf is tested on every treated unit the
    tree puts there (matched earlier or not) against its eligible controls;
    with ``"residual"`` only the treated still to be matched are tested.
    Returns the matched blocks (global indices) and the treated left
    unmatched.
    """
    Xc = XC[c_idx]
    minsplit, minbucket = config.minsplit, config.effective_minbucket
    full = config.grow_set == "full"
    if config.grow_on == "treated":
        grow_rows = np.arange(len(XT)) if full else t_idx
        tree = grow(XT[grow_rows], permute_labels(len(grow_rows), rng), minsplit, kinds, minbucket)
        test_X, test_leaf = XT[grow_rows], tree.train_leaf
        leaf_t = tree.train_leaf[np.searchsorted(grow_rows, t_idx)]
        leaf_c = tree.apply(Xc)
    else:
        grow_rows = np.arange(len(XC)) if full else c_idx
        tree = grow(XC[grow_rows], permute_labels(len(grow_rows), rng), minsplit, kinds, minbucket)
        leaf_c = tree.train_leaf[np.searchsorted(grow_rows, c_idx)]
        if config.balance_on == "leaf":
            test_X = XT
            test_leaf = tree.apply(XT)
            leaf_t = test_leaf[t_idx]
        else:
            leaf_t = tree.apply(XT[t_idx])
    if config.balance_on == "residual":
        test_X, test_leaf = XT[t_idx], leaf_t
    ok = leaves_balanced(test_X, test_leaf, Xc, leaf_c, tree.n_leaves, kind_code, ncat,
                         float(config.alpha))
    ok &= np.bincount(leaf_t, minlength=tree.n_leaves) > 0
    blocks = _blocks(t_idx, leaf_t, c_idx, leaf_c, ok)
    residual = t_idx[~ok[leaf_t]]
    return blocks, residual


def _tree_kinds(kinds):
    # dummies are split as ordered 0/1 values; only categorical columns use subsets
    from .dataset import CATEGORICAL, CONTINUOUS
    return [CATEGORICAL if k == CATEGORICAL else CONTINUOUS for k in kinds]


def _replicate(problem, k):
    cfg = problem.config
    rng = replication_rng(cfg.master_seed, k)
    nT, nC = len(problem.yT), len(problem.yC)
    residual = np.arange(nT)
    eligible = np.arange(nC)
    without = cfg.replacement == "without"
    kinds = _tree_kinds(problem.kinds)
    blocks = []
    used = 0
    while len(residual) and len(eligible) and used < cfg.max_iterations:
        new, residual = match_once(problem.XT, residual, problem.XC, eligible, cfg, rng,
                                   problem.kind_code, problem.ncat, kinds)
        used += 1
        blocks.extend(new)
        if without and new:
            taken = np.concatenate([c for _, c in new])
            eligible = np.setdiff1d(eligible, taken, assume_unique=True)
    weights = MatchWeights(nT, nC, tuple(blocks))
    m = weights.n_treated_matched
    if m == 0:
        nan = float("nan")
        return ReplicationResult(k, weights, nan, nan, nan, nan, 0, 0, used)
    den, form = cfg.denominator, cfg.variance_form
    tau = att_raw(weights, problem.yT, problem.yC, den)
    tau_adj = att_adjusted(weights, problem.yT, problem.yC, problem.mu0, den)
    var = variance_att(weights, problem.s2T, problem.s2C, form, den)
    var_adj = variance_att_adjusted(weights, problem.s2T, problem.s2C, problem.mu0, form, den)
    res = ReplicationResult(k, weights, float(tau), float(tau_adj), math.sqrt(var),
                            math.sqrt(var_adj), m, weights.n_controls_matched, used)
    logger.debug("replication %d: iterations=%d treated=%d controls=%d tau=%.4f",
                 k, used, m, res.n_controls_matched, tau)
    return res


def run_replication(sample, config, k, mu0=None):
    """Run replication ``k`` of ``config`` on ``sample``."""
    return _replicate(_Problem(sample, config, mu0), k)


_WORKER = {}


def _init_worker(sample, config, mu0):
    _WORKER["problem"] = _Problem(sample, config, mu0)


def _run_chunk(indices):
    problem = _WORKER["problem"]
    return [_replicate(problem, k) for k in indices]


def default_workers():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def run_replications(sample, config, workers=1, mu0=None):
    """All ``config.replications`` replications, ordered by index.

    With ``workers > 1`` the replications are spread over a process pool;
    the output is identical to the sequential run.
    """
    if mu0 is None:
        mu0 = fit_mu0(sample, config.mu0_minsplit)
    R = config.replications
    workers = max(1, min(int(workers or 1), R))
    if workers == 1:
        problem = _Problem(sample, config, mu0)
        return [_replicate(problem, k) for k in range(R)]
    chunks = [list(range(w, R, workers)) for w in range(workers)]
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(sample, config, mu0)) as pool:
        parts = list(pool.map(_run_chunk, chunks))
    results = [r for part in parts for r in part]
    results.sort(key=lambda r: r.index)
    return results


@dataclass(frozen=True, eq=False)
class RunOutcome:
    """Summary, proximity matrix and raw replications of one configuration."""

    config: RrpConfig
    summary: object
    proximity: object
    results: list


def run(sample, config, workers=1, mu0=None, dataset="", literal_proximity=False):
    """Run all replications of ``config`` and aggregate them.

    Raises :class:`~rrpmatch.exceptions.AllReplicationsFailed` when no
    replication matched a treated unit; the exception then carries the
    (all-zero) outcome in its ``outcome`` attribute, with ``summary=None``.
    """
    from .estimators import aggregate, attach_proximity
    from .proximity import accumulate

    if mu0 is None:
        mu0 = fit_mu0(sample, config.mu0_minsplit)
    results = run_replications(sample, config, workers, mu0)
    P = accumulate([r.weights for r in results])
    try:
        summary = aggregate(results, config, sample.n_T, sample.n_C, dataset)
    except AllReplicationsFailed as exc:
        exc.outcome = RunOutcome(config, None, P, results)
        raise
    attach_proximity(summary, P, sample, mu0, literal=literal_proximity)
    return RunOutcome(config, summary, P, results)


def derive_seed(master_seed, *tags):
    """Deterministic 63-bit seed for a sub-run identified by integer ``tags``."""
    state = np.random.SeedSequence([int(master_seed), *map(int, tags)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
