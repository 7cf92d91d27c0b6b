"""Scikit-learn style front end for RRP matching."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import CATEGORICAL, CONTINUOUS, CovariateSchema, Sample
from .exceptions import DimensionMismatch
from .rrp import RrpConfig, run


class RRPMatching(BaseEstimator):
    """Average treatment effect on the treated by random recursive partitioning.

    Parameters
    ----------
    minsplit : int, default=50
        Smallest node size at which the random trees still split.
    grow_on : {"treated", "controls"}, default="treated"
    replications : int, default=250
    max_iterations : int, default=50
    alpha : float, default=0.005
        Level of the within-leaf balance tests.
    replacement : {"without", "with"}, default="without"
    mu0_minsplit : int, default=20
        Minsplit of the control-outcome regression tree used for adjustment.
    denominator : {"matched", "all"}, default="matched"
    covariate_kinds : sequence of str, optional
        ``continuous``, ``binary`` or ``categorical`` per column; all
        continuous when omitted. Categorical columns must hold integer codes.
    random_state : int, default=0
        Master seed. Results depend only on it, never on ``n_jobs``.
    n_jobs : int, default=1
        Worker processes.

    Attributes
    ----------
    att_ : float
        Mean of the replication estimates.
    att_adjusted_ : float
        Regression-adjusted counterpart of ``att_``.
    summary_ : RunSummary
    proximity_ : ProximityMatrix
    results_ : list of ReplicationResult

    Examples
    --------
    >>> from rrpmatch import RRPMatching
    >>> est = RRPMatching(replications=20, random_state=1).fit(X, y, treatment)  # doctest: +SKIP
    >>> est.att_, est.summary_.ci_tau                                           # doctest: +SKIP
    """

    def __init__(self, minsplit=50, grow_on="treated", replications=250, max_iterations=50,
                 alpha=0.005, replacement="without", mu0_minsplit=20, denominator="matched",
                 covariate_kinds=None, random_state=0, n_jobs=1):
        self.minsplit = minsplit
        self.grow_on = grow_on
        self.replications = replications
        self.max_iterations = max_iterations
        self.alpha = alpha
        self.replacement = replacement
        self.mu0_minsplit = mu0_minsplit
        self.denominator = denominator
        self.covariate_kinds = covariate_kinds
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return RrpConfig(minsplit=self.minsplit, grow_on=self.grow_on,
                         replications=self.replications, max_iterations=self.max_iterations,
                         alpha=self.alpha, replacement=self.replacement,
                         master_seed=int(self.random_state), mu0_minsplit=self.mu0_minsplit,
                         denominator=self.denominator)

    def _sample(self, X, y, treatment):
        X = check_array(X, ensure_all_finite="allow-nan", dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        t = np.asarray(treatment).ravel()
        if not (len(X) == len(y) == len(t)):
            raise DimensionMismatch("X, y and treatment have different lengths")
        if not np.isin(t, (0, 1)).all():
            raise ValueError("treatment must be coded 0/1")
        kinds = self.covariate_kinds or [CONTINUOUS] * X.shape[1]
        if len(kinds) != X.shape[1]:
            raise DimensionMismatch("covariate_kinds does not match the number of columns")
        schema = CovariateSchema(tuple((f"x{j}", k) for j, k in enumerate(kinds)),
                                 outcome_column="y", treatment_column="t")
        cats = []
        for j, k in enumerate(kinds):
            if k == CATEGORICAL:
                col = X[:, j][~np.isnan(X[:, j])]
                if col.size and (col.min() < 0 or not np.all(col == np.floor(col))):
                    raise ValueError(f"categorical column {j} must hold non-negative integer codes")
                n_levels = int(col.max()) + 1 if col.size else 0
                cats.append(tuple(str(v) for v in range(n_levels)))
            else:
                cats.append(None)
        return Sample(schema, X, y, t.astype(bool), tuple(cats))

    def fit(self, X, y, treatment):
        """Run the replications.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
            Covariates, NaN for missing values.
        y : array-like of shape (n_samples,)
            Observed outcome.
        treatment : array-like of shape (n_samples,)
            1 for treated, 0 for controls.
        """
        sample = self._sample(X, y, treatment)
        outcome = run(sample, self._config(), workers=self.n_jobs)
        self.summary_ = outcome.summary
        self.proximity_ = outcome.proximity
        self.results_ = outcome.results
        self.att_ = outcome.summary.tau_hat
        self.att_adjusted_ = outcome.summary.tau_hat_adj
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else len(X[0])
        return self

    def match_frequencies(self):
        """Share of replications in which each treated/control pair was matched."""
        check_is_fitted(self, "proximity_")
        return self.proximity_.counts / self.proximity_.R
