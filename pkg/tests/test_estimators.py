import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrpmatch.estimators import (RunSummary, aggregate, att_adjusted, att_raw, fit_mu0,
                                 proximity_att, proximity_att_adjusted, summaries_to_json,
                                 variance_att, variance_att_adjusted)
from rrpmatch.exceptions import AllReplicationsFailed, EmptyProximity, NoMatches
from rrpmatch.proximity import accumulate
from rrpmatch.rrp import MatchWeights, ReplicationResult, RrpConfig, run

from conftest import make_sample, paired_clones


def blocks(*pairs):
    return tuple((np.array(t), np.array(c)) for t, c in pairs)


@pytest.fixture
def weights():
    # treated 0,1 share controls {0,1}; treated 2 -> control 1; treated 3 unmatched
    return MatchWeights(4, 3, blocks(([0, 1], [0, 1]), ([2], [1])))


class TestPerReplication:
    yT = np.array([10.0, 12.0, 9.0, 100.0])
    yC = np.array([8.0, 6.0, 50.0])

    def test_att_raw(self, weights):
        expected = ((10 - 7) + (12 - 7) + (9 - 6)) / 3
        assert att_raw(weights, self.yT, self.yC) == pytest.approx(expected)
        assert att_raw(weights, self.yT, self.yC, "all") == pytest.approx(expected * 3 / 4)

    def test_no_matches(self):
        with pytest.raises(NoMatches):
            att_raw(MatchWeights(2, 2, ()), [1.0, 2.0], [1.0, 2.0])

    def test_variance_forms(self, weights):
        # literal: sum_i (s_T + sum_j (1/|C_i|)^2 s_C) / m^2
        literal = (3 * 4.0 + (2 * 2 * 0.25 + 1) * 9.0) / 9
        assert variance_att(weights, 4.0, 9.0, "literal") == pytest.approx(literal)
        # pooled: a = (1, 1 + 1) per control
        pooled = (3 * 4.0 + (1 + 4) * 9.0) / 9
        assert variance_att(weights, 4.0, 9.0, "pooled") == pytest.approx(pooled)

    def test_forms_agree_without_shared_controls(self):
        w = MatchWeights(3, 5, blocks(([0], [0, 1]), ([1], [2]), ([2], [3, 4])))
        assert variance_att(w, 2.0, 3.0, "pooled") == pytest.approx(
            variance_att(w, 2.0, 3.0, "literal"))

    def test_pooled_counts_shared_controls(self):
        w = MatchWeights(3, 4, blocks(([0], [0, 1]), ([1, 2], [2, 3])))
        assert variance_att(w, 2.0, 3.0, "pooled") == pytest.approx((6 + 2.5 * 3) / 9)
        assert variance_att(w, 2.0, 3.0, "literal") == pytest.approx((6 + 1.5 * 3) / 9)

    def test_constant_mu0_exact(self, weights):
        s = make_sample(np.zeros((4, 1)), self.yT, np.zeros((3, 1)), self.yC)
        mu0 = fit_mu0(s, 1000)
        assert att_adjusted(weights, self.yT, self.yC, mu0) == att_raw(weights, self.yT, self.yC)

    def test_adjusted_is_residual_contrast(self, weights, ll):
        mu0 = fit_mu0(ll)
        rng = np.random.default_rng(0)
        t = np.sort(rng.choice(ll.n_T, 30, replace=False))
        w = MatchWeights(ll.n_T, ll.n_C, blocks((t[:10], np.arange(5)), (t[10:], np.arange(5, 40))))
        resid = att_raw(w, ll.y_treated - mu0.mu_T, ll.y_control - mu0.mu_C)
        assert att_adjusted(w, ll.y_treated, ll.y_control, mu0) == pytest.approx(resid, rel=1e-10)
        assert variance_att_adjusted(w, 1.0, 1.0, mu0) > variance_att(w, 1.0, 1.0)


def result(k, tau, m=10, it=1):
    w = MatchWeights(10, 10, blocks((np.arange(m), [0])) if m else ())
    return ReplicationResult(k, w, tau, tau + 1, 2.0, 3.0, m, 1 if m else 0, it)


class TestAggregate:
    def test_summary_fields(self):
        rs = [result(k, float(k)) for k in range(20)] + [result(20, math.nan, m=0, it=50)]
        s = aggregate(rs, RrpConfig(minsplit=8, replications=21), 10, 10)
        assert s.tau_hat == pytest.approx(9.5)
        assert s.tau_hat_adj == pytest.approx(10.5)
        assert s.n_defined == 20 and s.replications == 21
        assert s.pct_over_threshold == pytest.approx(100 * 20 / 21)
        assert s.avg_iterations == pytest.approx((20 + 50) / 21)
        lo, hi = s.ci_tau
        assert lo <= np.median(np.arange(20)) <= hi

    def test_ci_type7(self):
        rs = [result(k, float(v)) for k, v in enumerate([5, 1, 4, 2, 3])]
        s = aggregate(rs, RrpConfig(), 10, 10)
        assert s.ci_tau == pytest.approx((1.1, 4.9))

    def test_order_invariant(self):
        rs = [result(k, float(k * k % 7)) for k in range(15)]
        a = aggregate(rs, RrpConfig(), 10, 10)
        b = aggregate(rs[::-1], RrpConfig(), 10, 10)
        assert a.to_dict() == b.to_dict()

    def test_threshold_uses_95_percent(self):
        rs = [result(0, 1.0, m=10), result(1, 1.0, m=9)]  # 9 < 9.5
        assert aggregate(rs, RrpConfig(), 10, 10).pct_over_threshold == 50.0

    def test_all_failed(self):
        with pytest.raises(AllReplicationsFailed):
            aggregate([result(0, math.nan, m=0)], RrpConfig(), 10, 10)

    def test_json_roundtrip(self):
        s = aggregate([result(k, float(k)) for k in range(5)], RrpConfig(), 10, 10)
        back = RunSummary.from_dict(json.loads(json.dumps(s.to_dict())))
        assert back.to_dict() == s.to_dict()
        doc = json.loads(summaries_to_json([s], {"seed": 1}))
        assert doc["version"] == 1 and doc["metadata"] == {"seed": 1}

    def test_csv_row_labels(self):
        s = aggregate([result(k, float(k)) for k in range(5)], RrpConfig(), 10, 10)
        row = dict(zip(RunSummary.CSV_COLUMNS, s.csv_row()))
        assert row["pct_ot"] == "-" and row["CI_tau"].startswith("(")


class TestProximityEstimator:
    def test_normalized_weights(self):
        P = np.array([[3, 1, 0], [0, 0, 0], [0, 2, 2]])
        yT, yC = np.array([10.0, 0.0, 7.0]), np.array([4.0, 8.0, 2.0])
        tau, sigma = proximity_att(P, yT, yC, 1.0, 1.0)
        expected = ((10 - (3 * 4 + 8) / 4) + (7 - 5)) / 2
        assert tau == pytest.approx(expected)
        var = (2 + (9 / 16 + 1 / 16) + (0.25 + 0.25)) / 4
        assert sigma == pytest.approx(math.sqrt(var))

    def test_literal_weights(self):
        P = np.array([[3, 1]])
        tau, _ = proximity_att(P, np.array([10.0]), np.array([4.0, 8.0]), literal=True)
        assert tau == pytest.approx(10 - 20 / 2)

    def test_empty(self):
        with pytest.raises(EmptyProximity):
            proximity_att(np.zeros((2, 2)), [1.0, 2.0], [1.0, 2.0])

    def test_constant_mu0_exact(self):
        s = make_sample(np.zeros((3, 1)), [10.0, 0.3, 7.1], np.zeros((3, 1)), [4.0, 8.2, 2.0])
        mu0 = fit_mu0(s, 1000)
        P = np.array([[3, 1, 0], [0, 1, 0], [0, 2, 2]])
        raw, _ = proximity_att(P, s.y_treated, s.y_control)
        adj, _ = proximity_att_adjusted(P, s.y_treated, s.y_control, mu0)
        assert adj == raw


class TestExactFixtures:
    def test_paired_clones_all_zero(self, clones):
        out = run(clones, RrpConfig(minsplit=2, replications=15, master_seed=4))
        s = out.summary
        assert all(r.tau_k == 0.0 for r in out.results)
        assert s.tau_hat == 0.0 and s.tau_hat_adj == 0.0
        assert s.tau_tilde == 0.0 and s.tau_tilde_adj == 0.0
        np.testing.assert_array_equal(out.proximity.counts, 15 * np.eye(clones.n_T, dtype=int))

    def test_single_leaf_is_naive(self, dyadic):
        out = run(dyadic, RrpConfig(minsplit=1000, replications=8, master_seed=2))
        naive = dyadic.y_treated.mean() - dyadic.y_control.mean()
        assert out.summary.tau_hat == naive
        assert out.summary.tau_tilde == naive
        assert len({r.tau_k for r in out.results}) == 1
        assert out.summary.ci_tau == (naive, naive)

    def test_constant_mu0_run(self, ll):
        out = run(ll, RrpConfig(minsplit=20, replications=10, mu0_minsplit=10_000))
        for r in out.results:
            assert r.tau_k_adjusted == r.tau_k
        assert out.summary.tau_hat_adj == out.summary.tau_hat


def _shifted(sample, c=0.0, a=1.0):
    return make_sample(sample.X_treated, a * sample.y_treated + c, sample.X_control,
                       a * sample.y_control, list(sample.kinds))


EQ_CFG = RrpConfig(minsplit=8, replications=12, master_seed=3, mu0_minsplit=6)


@pytest.fixture(scope="module")
def base():
    rng = np.random.default_rng(8)
    XT, XC = rng.normal(0.2, 1, (30, 2)), rng.normal(0, 1, (50, 2))
    s = make_sample(XT, rng.normal(50, 10, 30), XC, rng.normal(45, 10, 50))
    return s, run(s, EQ_CFG).summary


class TestEquivariance:
    CFG = EQ_CFG

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-1e4, 1e4))
    def test_shift_treated(self, base, c):
        s, ref = base
        out = run(_shifted(s, c=c), self.CFG).summary
        tol = dict(rel=1e-9, abs=1e-7)
        for name in ("tau_hat", "tau_hat_adj", "tau_tilde", "tau_tilde_adj"):
            assert getattr(out, name) == pytest.approx(getattr(ref, name) + c, **tol)
        for name in ("ci_tau", "ci_tau_adj"):
            assert getattr(out, name) == pytest.approx(tuple(v + c for v in getattr(ref, name)),
                                                       **tol)
        for name in ("sigma_tau", "sigma_tau_adj", "sigma_tilde"):
            assert getattr(out, name) == pytest.approx(getattr(ref, name), **tol)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(1e-3, 1e3))
    def test_scale_all(self, base, a):
        s, ref = base
        out = run(_shifted(s, a=a), self.CFG).summary
        tol = dict(rel=1e-9, abs=1e-9)
        for name in ("tau_hat", "tau_hat_adj", "tau_tilde", "tau_tilde_adj", "sigma_tau",
                     "sigma_tau_adj", "sigma_tilde", "sigma_tilde_adj"):
            assert getattr(out, name) == pytest.approx(a * getattr(ref, name), **tol)
        assert out.ci_tau == pytest.approx(tuple(a * v for v in ref.ci_tau), **tol)
