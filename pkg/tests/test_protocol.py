import json
import math

import pytest

from rrpmatch.estimators import RunSummary
from rrpmatch.protocol import (AMBIGUOUS, MATCHABLE, NOT_MATCHABLE, ProtocolConfig,
                               classify_mode, combine_cases, max_spread, relative_gap,
                               run_protocol)
from rrpmatch.rrp import RrpConfig


def summary(split, pct, iters, tau, tau_adj):
    nan = math.nan
    return RunSummary(split, "treated", 100, 10, 10, tau, 1.0, tau_adj, 1.0, 10, 10, pct,
                      nan, nan, (nan, nan), (nan, nan), iters, 100)


PC = ProtocolConfig(splits=(50, 20, 8))


class TestClassify:
    def test_case_ii(self):
        ss = [summary(50, 100, 3, 1700, 1690), summary(20, 95, 4, 1750, 1700),
              summary(8, 40, 12, 1900, 1500)]
        case, ev = classify_mode(ss, PC)
        assert case == "ii"
        assert ev["high_pct_splits"] == [50, 20]

    def test_case_i(self):
        ss = [summary(50, 50, 50, -1900, 600), summary(20, 3, 50, -1700, 750),
              summary(8, 0, 50, -2100, 755)]
        assert classify_mode(ss, PC)[0] == "i"

    def test_low_pct_but_stable_adjustment_is_iii(self):
        ss = [summary(s, 10, 50, 1000, 1010) for s in (50, 20, 8)]
        assert classify_mode(ss, PC)[0] == "iii"

    def test_high_pct_too_many_iterations_is_iii(self):
        ss = [summary(s, 100, 20, 1000, 1000) for s in (50, 20, 8)]
        assert classify_mode(ss, PC)[0] == "iii"

    def test_high_pct_unstable_estimates_is_iii(self):
        ss = [summary(50, 100, 2, 1000, 1000), summary(20, 100, 2, 2000, 2000),
              summary(8, 100, 2, 1000, 1000)]
        assert classify_mode(ss, PC)[0] == "iii"

    def test_majority_is_strict(self):
        pc = ProtocolConfig(splits=(50, 20, 8, 4))
        ss = [summary(50, 100, 2, 1, 1), summary(20, 100, 2, 1, 1),
              summary(8, 10, 2, 1, 1), summary(4, 10, 2, 1, 1)]
        assert classify_mode(ss, pc)[0] == "iii"

    def test_combine(self):
        assert combine_cases({"treated": "i", "controls": "ii"}) == "ii"
        assert combine_cases({"treated": "i", "controls": "iii"}) == "i"
        assert combine_cases({"treated": "iii", "controls": "iii"}) == "iii"

    def test_gaps(self):
        assert relative_gap(0.0, 0.0) == 0.0
        assert relative_gap(-1.0, 1.0) == 2.0
        assert relative_gap(math.nan, 1.0) == math.inf
        assert max_spread([100, 110, 90]) == pytest.approx(20 / 110)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(pct_low=90, pct_high=90), dict(splits=()),
                                    dict(splits=(1,)), dict(initial_R=0),
                                    dict(modes=("sideways",))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ProtocolConfig(**kw)


BASE = RrpConfig(master_seed=3)
FAST = dict(initial_R=8, confirm_R=12, splits=(8, 4, 2))


class TestRun:
    def test_matchable(self, clones):
        v = run_protocol(clones, BASE, ProtocolConfig(**FAST))
        assert v.case == MATCHABLE and v.exit_code == 0
        assert [p.label for p in v.passes] == ["initial", "confirmation"]
        assert v.estimates and all(abs(s.tau_hat) < 1e-9 for s in v.estimates)
        assert any(s.pct_over_threshold >= 90 for s in v.estimates)
        # estimates come from the confirmation pass only
        assert all(s.replications == 12 for s in v.estimates)

    def test_not_matchable_when_nothing_matches(self, disjoint):
        v = run_protocol(disjoint, BASE.with_(max_iterations=3), ProtocolConfig(**FAST))
        assert v.case == NOT_MATCHABLE and v.exit_code == 2
        assert v.evidence

    def test_ambiguous_forced_by_thresholds(self, clones):
        pc = ProtocolConfig(pct_high=100.5, pct_low=0.0, **FAST)
        v = run_protocol(clones, BASE, pc)
        assert v.case == AMBIGUOUS and v.exit_code == 3
        assert [p.label for p in v.passes] == ["initial", "repeat"]
        assert v.iter_flag_history == [False, True]
        assert not v.estimates

    def test_deterministic(self, clones):
        pc = ProtocolConfig(**FAST)
        a = run_protocol(clones, BASE, pc).to_json()
        b = run_protocol(clones, BASE, pc).to_json()
        assert a == b
        doc = json.loads(a)
        assert doc["version"] == 1 and doc["case"] == MATCHABLE

    def test_report_mentions_verdict(self, clones):
        v = run_protocol(clones, BASE, ProtocolConfig(**FAST))
        assert v.report().splitlines()[0] == "verdict: Matchable (exit code 0)"
