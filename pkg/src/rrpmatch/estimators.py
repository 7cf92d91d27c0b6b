"""ATT estimators, their variances and the aggregation of replications.

Per-replication quantities are computed from a :class:`~rrpmatch.rrp.MatchWeights`
object, whose matches come in leaf blocks: every treated unit of a block is
matched to every control of the same block. All treated of a block therefore
share one match set ``C_i`` and the sums below run over blocks instead of
over the dense treated x control matrix.

Variance plug-ins
-----------------
``Var(Y_i^T)`` and ``Var(Y_j^C)`` are replaced by the unbiased variances of
all treated and all control outcomes. Two algebraic forms are offered:

``"literal"``
    ``(1/m^2) sum_i (s_T^2 + sum_j (w_ij/|C_i|)^2 s_C^2)``, term by term.
``"pooled"``
    The control weights are first summed per control,
    ``a_j = sum_i w_ij/|C_i|``, and ``Var = (m s_T^2 + sum_j a_j^2 s_C^2) / m^2``.
    This is the exact variance of the estimator under independent outcomes,
    and accounts for controls shared by several treated.

``m`` is the number of matched treated (or ``n_T`` with ``denominator="all"``).
"""

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .balance import shapiro_wilk, significance_marks
from .cart import grow
from .exceptions import AllReplicationsFailed, EmptyGroup, EmptyProximity, InapplicableTest, NoMatches

DENOMINATORS = ("matched", "all")
VARIANCE_FORMS = ("pooled", "literal")
SUMMARY_VERSION = 1


# -- difference-in-covariates model -----------------------------------------------

@dataclass(frozen=True, eq=False)
class Mu0Model:
    """Regression tree for E(Y | X, control) plus its predictions on a sample.

    ``mu_T``/``mu_C`` hold the fitted mean for each treated/control unit and
    ``v_T``/``v_C`` the variance of that mean (leaf outcome variance divided by
    leaf size).
    """

    tree: object
    minsplit_mu0: int
    mu_T: np.ndarray
    mu_C: np.ndarray
    v_T: np.ndarray
    v_C: np.ndarray

    def predict(self, X):
        return self.tree.predict(X)

    def variance_of_mean(self, X):
        leaves = self.tree.apply(X)
        return self.tree.leaf_variance[leaves] / self.tree.leaf_count[leaves]


def fit_mu0(sample, minsplit_mu0=20):
    """Grow the control-outcome tree used by the adjusted estimator.

    Nodes below ``minsplit_mu0`` units are not split, so a value above the
    number of controls gives a root-only model predicting the control mean.
    """
    if sample.n_C < 1:
        raise EmptyGroup("no controls to fit the outcome model")
    split = max(int(minsplit_mu0), 2)
    tree = grow(sample.X_control, sample.y_control, split, sample.kinds)
    leaf_var = tree.leaf_variance / tree.leaf_count
    lt = tree.apply(sample.X_treated)
    lc = tree.train_leaf
    return Mu0Model(tree, int(minsplit_mu0), tree.leaf_value[lt], tree.leaf_value[lc],
                    leaf_var[lt], leaf_var[lc])


# -- per-replication estimators ----------------------------------------------------

def _denominator(weights, denominator):
    if denominator not in DENOMINATORS:
        raise ValueError(f"denominator must be one of {DENOMINATORS}")
    m = weights.n_treated_matched
    if m == 0:
        raise NoMatches("no treated unit was matched")
    return m if denominator == "matched" else weights.n_T


def _contrast(weights, y_t, y_c, denominator):
    total = 0.0
    for t, c in weights.blocks:
        total += y_t[t].sum() - len(t) * y_c[c].mean()
    return total / _denominator(weights, denominator)


def att_raw(weights, y_treated, y_control, denominator="matched"):
    """Mean over matched treated of ``Y_i - mean(Y_j, j in C_i)``."""
    return _contrast(weights, np.asarray(y_treated, float), np.asarray(y_control, float),
                     denominator)


def _centred_fit(mu0):
    # Fitted values relative to one of them: a constant model gives exact zeros,
    # so the adjusted estimate then equals the raw one bit for bit.
    ref = mu0.mu_C[0] if len(mu0.mu_C) else 0.0
    return mu0.mu_T - ref, mu0.mu_C - ref


def att_adjusted(weights, y_treated, y_control, mu0, denominator="matched"):
    """Difference-in-covariates adjusted estimate: outcomes minus fitted ``mu0``.

    Computed as the raw estimate minus the same contrast taken on the fitted
    values, which is algebraically the contrast of the residuals.
    """
    ft, fc = _centred_fit(mu0)
    return (att_raw(weights, y_treated, y_control, denominator)
            - _contrast(weights, ft, fc, denominator))


def _control_weights(weights):
    """``a_j = sum_i w_ij / |C_i|`` for every control."""
    a = np.zeros(weights.n_C)
    for t, c in weights.blocks:
        np.add.at(a, c, len(t) / len(c))
    return a


def _weighted_sums(weights, var_t, var_c, form):
    """Return ``sum_i var_t[i]`` and the control term of the variance."""
    if form not in VARIANCE_FORMS:
        raise ValueError(f"variance form must be one of {VARIANCE_FORMS}")
    var_t = np.broadcast_to(np.asarray(var_t, float), (weights.n_T,))
    var_c = np.broadcast_to(np.asarray(var_c, float), (weights.n_C,))
    treated_term = 0.0
    control_term = 0.0
    for t, c in weights.blocks:
        treated_term += var_t[t].sum()
        if form == "literal":
            control_term += len(t) * var_c[c].sum() / len(c) ** 2
    if form == "pooled":
        a = _control_weights(weights)
        control_term = float((a * a * var_c).sum())
    return treated_term, control_term


def variance_att(weights, var_treated, var_control, form="pooled", denominator="matched"):
    """Variance of the raw estimate with plug-in outcome variances.

    ``var_treated``/``var_control`` are scalars (homoscedastic plug-ins) or
    per-unit arrays.
    """
    m = _denominator(weights, denominator)
    a, b = _weighted_sums(weights, var_treated, var_control, form)
    return (a + b) / m ** 2


def variance_att_adjusted(weights, var_treated, var_control, mu0, form="pooled",
                          denominator="matched"):
    """Variance of the adjusted estimate: raw variance plus the fitted-mean terms."""
    m = _denominator(weights, denominator)
    a, b = _weighted_sums(weights, var_treated, var_control, form)
    c, d = _weighted_sums(weights, mu0.v_T, mu0.v_C, form)
    return (a + b + c + d) / m ** 2


# -- aggregation -------------------------------------------------------------------

def _fmt(v, digits=1):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.{digits}f}"


@dataclass
class RunSummary:
    """Aggregated results of R replications at one split value."""

    split: int
    grow_on: str
    replications: int
    n_T: int
    n_C: int
    tau_hat: float
    sigma_tau: float
    tau_hat_adj: float
    sigma_tau_adj: float
    avg_T: float
    avg_C: float
    pct_over_threshold: float
    sw_p: float
    sw_adj_p: float
    ci_tau: tuple
    ci_tau_adj: tuple
    avg_iterations: float
    n_defined: int
    denominator_mode: str = "matched"
    variance_form: str = "pooled"
    replacement: str = "without"
    tau_tilde: float = float("nan")
    sigma_tilde: float = float("nan")
    tau_tilde_adj: float = float("nan")
    sigma_tilde_adj: float = float("nan")
    dataset: str = ""
    seed: int = None
    extra: dict = field(default_factory=dict)

    CSV_COLUMNS = ("dataset", "grow_on", "split", "tau_hat", "sigma_tau", "tau_hat_adj",
                   "sigma_tau_adj", "T", "C", "pct_ot", "SW", "SW_adj", "CI_tau",
                   "CI_tau_adj", "avg_iterations", "tau_tilde", "sigma_tilde",
                   "tau_tilde_adj", "sigma_tilde_adj")

    @property
    def all_over(self):
        return self.pct_over_threshold == 100.0

    @property
    def pct_label(self):
        return "-" if self.all_over else f"{self.pct_over_threshold:.1f}"

    def csv_row(self):
        ci = f"({_fmt(self.ci_tau[0])} : {_fmt(self.ci_tau[1])})"
        ci_adj = f"({_fmt(self.ci_tau_adj[0])} : {_fmt(self.ci_tau_adj[1])})"
        return [self.dataset, self.grow_on, str(self.split), _fmt(self.tau_hat),
                _fmt(self.sigma_tau), _fmt(self.tau_hat_adj), _fmt(self.sigma_tau_adj),
                f"{self.avg_T:.0f}", f"{self.avg_C:.0f}", self.pct_label,
                significance_marks(self.sw_p), significance_marks(self.sw_adj_p), ci, ci_adj,
                _fmt(self.avg_iterations), _fmt(self.tau_tilde), _fmt(self.sigma_tilde),
                _fmt(self.tau_tilde_adj), _fmt(self.sigma_tilde_adj)]

    def to_dict(self):
        d = asdict(self)
        d["ci_tau"] = list(self.ci_tau)
        d["ci_tau_adj"] = list(self.ci_tau_adj)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        d["ci_tau"] = [None if not math.isfinite(x) else x for x in self.ci_tau]
        d["ci_tau_adj"] = [None if not math.isfinite(x) else x for x in self.ci_tau_adj]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("ci_tau", "ci_tau_adj"):
            d[k] = tuple(float("nan") if x is None else x for x in d[k])
        for k, v in list(d.items()):
            if v is None and k != "seed":
                d[k] = float("nan")
        return cls(**d)


def summaries_to_json(summaries, metadata=None):
    """Versioned JSON document holding a list of summaries."""
    doc = {"version": SUMMARY_VERSION, "metadata": metadata or {},
           "summaries": [s.to_dict() for s in summaries]}
    return json.dumps(doc, indent=2, sort_keys=True)


def _sw(values):
    try:
        return shapiro_wilk(values).p_value
    except InapplicableTest:
        return float("nan")


def _ci(values):
    lo, hi = np.quantile(values, [0.025, 0.975])
    return float(lo), float(hi)


def aggregate(results, config, n_T, n_C, dataset=""):
    """Combine replication results (ordered by replication index) into a summary.

    Replications without matches are left out of the estimate distribution
    but still count in the denominator of the over-threshold percentage and
    in the averages of matched units and iterations.
    """
    results = sorted(results, key=lambda r: r.index)
    R = len(results)
    if R == 0:
        raise AllReplicationsFailed("no replications were run")
    ok = [r for r in results if r.n_treated_matched > 0]
    if not ok:
        raise AllReplicationsFailed(f"none of {R} replications matched a treated unit")
    tau = np.array([r.tau_k for r in ok])
    tau_adj = np.array([r.tau_k_adjusted for r in ok])
    sig = np.array([r.sigma_k for r in ok])
    sig_adj = np.array([r.sigma_k_adjusted for r in ok])
    over = sum(r.n_treated_matched >= 0.95 * n_T for r in results)
    return RunSummary(
        split=config.minsplit, grow_on=config.grow_on, replications=R, n_T=n_T, n_C=n_C,
        tau_hat=float(tau.mean()), sigma_tau=float(sig.mean()),
        tau_hat_adj=float(tau_adj.mean()), sigma_tau_adj=float(sig_adj.mean()),
        avg_T=float(np.mean([r.n_treated_matched for r in results])),
        avg_C=float(np.mean([r.n_controls_matched for r in results])),
        pct_over_threshold=100.0 * over / R,
        sw_p=_sw(tau), sw_adj_p=_sw(tau_adj),
        ci_tau=_ci(tau), ci_tau_adj=_ci(tau_adj),
        avg_iterations=float(np.mean([r.iterations_used for r in results])),
        n_defined=len(ok), denominator_mode=config.denominator,
        variance_form=config.variance_form, replacement=config.replacement,
        dataset=dataset, seed=config.master_seed,
        extra={"grow_set": config.grow_set, "balance_on": config.balance_on,
               "minbucket": config.effective_minbucket, "alpha": config.alpha,
               "max_iterations": config.max_iterations,
               "mu0_minsplit": config.mu0_minsplit})


# -- proximity-based estimator ------------------------------------------------------

def proximity_att(P, y_treated, y_control, var_treated=None, var_control=None, literal=False):
    """ATT from the accumulated proximity matrix and its Eq.-2-style variance.

    Each treated row with at least one match contributes ``Y_i`` minus the
    proximity-weighted mean of its controls. With ``literal=True`` the
    weighted sum is divided by the number of distinct matched controls
    instead of the total weight. Returns ``(tau_tilde, sigma_tilde)``.
    """
    counts = np.asarray(getattr(P, "counts", P), dtype=float)
    y_t = np.asarray(y_treated, float)
    y_c = np.asarray(y_control, float)
    if counts.shape != (len(y_t), len(y_c)):
        raise ValueError("proximity matrix does not match the outcome vectors")
    rows = counts.sum(axis=1) > 0
    if not rows.any():
        raise EmptyProximity("proximity matrix has no matched treated")
    Wn = _proximity_weights(counts[rows], literal)
    m = int(rows.sum())
    tau = float((y_t[rows] - Wn @ y_c).mean())
    if var_treated is None:
        var_treated = y_t.var(ddof=1) if len(y_t) > 1 else 0.0
    if var_control is None:
        var_control = y_c.var(ddof=1) if len(y_c) > 1 else 0.0
    vt = np.broadcast_to(np.asarray(var_treated, float), y_t.shape)[rows]
    vc = np.broadcast_to(np.asarray(var_control, float), y_c.shape)
    var = (vt.sum() + ((Wn * Wn) @ vc).sum()) / m ** 2
    return tau, math.sqrt(var)


def _proximity_weights(Q, literal):
    norm = (Q > 0).sum(axis=1) if literal else Q.sum(axis=1)
    return Q / norm[:, None]


def proximity_att_adjusted(P, y_treated, y_control, mu0, literal=False):
    """Adjusted proximity estimate: outcomes net of ``mu0``, fitted-mean variance added."""
    y_t = np.asarray(y_treated, float)
    y_c = np.asarray(y_control, float)
    s_t = y_t.var(ddof=1) if len(y_t) > 1 else 0.0
    s_c = y_c.var(ddof=1) if len(y_c) > 1 else 0.0
    tau, sigma = proximity_att(P, y_t, y_c, s_t + mu0.v_T, s_c + mu0.v_C, literal=literal)
    counts = np.asarray(getattr(P, "counts", P), dtype=float)
    rows = counts.sum(axis=1) > 0
    ft, fc = _centred_fit(mu0)
    correction = float((ft[rows] - _proximity_weights(counts[rows], literal) @ fc).mean())
    return tau - correction, sigma


def attach_proximity(summary, P, sample, mu0, literal=False):
    """Fill the proximity-estimator fields of ``summary`` in place."""
    try:
        summary.tau_tilde, summary.sigma_tilde = proximity_att(
            P, sample.y_treated, sample.y_control, literal=literal)
        summary.tau_tilde_adj, summary.sigma_tilde_adj = proximity_att_adjusted(
            P, sample.y_treated, sample.y_control, mu0, literal=literal)
    except EmptyProximity:
        warnings.warn("proximity matrix is empty; proximity estimates left undefined")
    return summary
