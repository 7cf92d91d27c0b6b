"""Matching estimators built on random recursive partitioning."""

__version__ = "0.1.0"

from .dataset import (CovariateSchema, LALONDE_SCHEMA, Sample, load_bundled, load_sample,
                      naive_target, resolve_sample)
from .cart import RegressionTree, grow
from .rrp import RrpConfig, run, run_replications
from .estimators import RunSummary, fit_mu0, proximity_att
from .proximity import ProximityMatrix, accumulate, render, row_quality
from .protocol import ProtocolConfig, Verdict, run_protocol
from .estimator import RRPMatching

__all__ = [
    "CovariateSchema", "LALONDE_SCHEMA", "Sample", "load_bundled", "load_sample",
    "naive_target", "resolve_sample", "RegressionTree", "grow", "RrpConfig", "run",
    "run_replications", "RunSummary", "fit_mu0", "proximity_att", "ProximityMatrix",
    "accumulate", "render", "row_quality", "ProtocolConfig", "Verdict", "run_protocol",
    "RRPMatching",
]
