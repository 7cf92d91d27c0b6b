import numpy as np
import pytest

from rrpmatch.dataset import CONTINUOUS, CovariateSchema, Sample, load_bundled


def make_sample(XT, yT, XC, yC, kinds=None):
    """Build a :class:`Sample` from separate treated / control arrays."""
    XT = np.asarray(XT, dtype=float)
    XC = np.asarray(XC, dtype=float)
    p = XT.shape[1]
    kinds = kinds or [CONTINUOUS] * p
    schema = CovariateSchema(tuple((f"x{j}", k) for j, k in enumerate(kinds)),
                             outcome_column="y", treatment_column="t")
    cats = tuple(None if k == CONTINUOUS else ("0", "1") for k in kinds)
    return Sample(schema, np.vstack([XT, XC]), np.r_[yT, yC],
                  np.r_[np.ones(len(XT), bool), np.zeros(len(XC), bool)], cats)


def paired_clones(n=24, p=2, seed=0):
    """Every treated unit has one control with identical covariates and outcome."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = np.round(rng.normal(1000, 300, size=n), 2)
    return make_sample(X, y, X.copy(), y.copy())


def balanced_dyadic(nT=16, copies=2, seed=1):
    """Controls repeat the treated covariates; outcomes are small integers.

    Group sizes are powers of two so the difference in means is computed
    without rounding error on every code path.
    """
    rng = np.random.default_rng(seed)
    XT = rng.normal(size=(nT, 2))
    XC = np.tile(XT, (copies, 1))
    yT = rng.integers(0, 100, nT).astype(float)
    yC = rng.integers(0, 100, nT * copies).astype(float)
    return make_sample(XT, yT, XC, yC)


def separated(n=30, seed=2):
    """Treated and controls live in disjoint covariate ranges: nothing can match."""
    rng = np.random.default_rng(seed)
    XT = rng.uniform(0, 1, size=(n, 1))
    XC = rng.uniform(10, 11, size=(2 * n, 1))
    return make_sample(XT, rng.normal(size=n), XC, rng.normal(size=2 * n))


@pytest.fixture
def clones():
    return paired_clones()


@pytest.fixture
def dyadic():
    return balanced_dyadic()


@pytest.fixture
def disjoint():
    return separated()


@pytest.fixture(scope="session")
def ll():
    return load_bundled("LL")


@pytest.fixture(scope="session")
def dw():
    return load_bundled("DW")


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE_LINES = []


def record_criterion(label, passed, detail):
    """Remember one acceptance verdict; all are printed at the end of the run."""
    line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
