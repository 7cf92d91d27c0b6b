"""Automated matchability protocol.

Replications are run for both grow modes over a list of split values and
three indicators are read off each run: the share of replications matching
at least 95% of the treated, the average number of iterations, and the raw
and adjusted estimates. Each grow mode is then classified:

* ``"i"``: the over-threshold share is below ``pct_low`` for a majority of
  splits and the raw/adjusted estimates disagree by more than
  ``adjustment_stability`` (relative) for a majority of splits.
* ``"ii"``: a majority of splits reach ``pct_high``; on those splits the
  mean iteration count is at most ``iter_low`` and the raw estimate varies
  by at most ``adjustment_stability`` (largest pairwise relative spread).
* ``"iii"``: anything else.

A majority means strictly more than half of the splits considered. The
sample-level case is ``"ii"`` if some grow mode is in case ii, else ``"i"`` if
some mode is in case i, else ``"iii"``. Case ii triggers a confirmation run
with ``confirm_R`` replications on the larger grow group, restricted to the
splits that reached ``pct_high``; case iii triggers one repeat of the whole
grid with ``confirm_R`` replications. A second inconclusive outcome is
reported as ambiguous.
"""

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .exceptions import AllReplicationsFailed
from .rrp import GROW_MODES, RrpConfig, derive_seed, run
from .estimators import fit_mu0

logger = logging.getLogger(__name__)

MATCHABLE = "Matchable"
NOT_MATCHABLE = "NotMatchable"
AMBIGUOUS = "Ambiguous"
EXIT_CODES = {MATCHABLE: 0, NOT_MATCHABLE: 2, AMBIGUOUS: 3}
DEFAULT_SPLITS = (50, 32, 20, 16, 8, 4, 2)
VERDICT_VERSION = 1


@dataclass(frozen=True)
class ProtocolConfig:
    initial_R: int = 100
    confirm_R: int = 250
    splits: tuple = DEFAULT_SPLITS
    pct_high: float = 90.0
    pct_low: float = 60.0
    iter_low: float = 10.0
    adjustment_stability: float = 0.25
    modes: tuple = GROW_MODES

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(int(s) for s in self.splits))
        object.__setattr__(self, "modes", tuple(self.modes))
        if not self.splits:
            raise ValueError("at least one split value is required")
        if min(self.splits) < 2:
            raise ValueError("split values must be at least 2")
        if not self.pct_low < self.pct_high:
            raise ValueError("pct_low must be below pct_high")
        if self.initial_R < 1 or self.confirm_R < 1:
            raise ValueError("replication counts must be positive")
        if not self.modes or any(m not in GROW_MODES for m in self.modes):
            raise ValueError(f"modes must be a non-empty subset of {GROW_MODES}")


NOISE = 1e-9


def relative_gap(a, b, floor=0.0):
    """``|a - b| / max(|a|, |b|, floor)``; 0 when that is 0, inf when undefined."""
    if not (np.isfinite(a) and np.isfinite(b)):
        return float("inf")
    top = max(abs(a), abs(b), floor)
    return 0.0 if top == 0 else abs(a - b) / top


def max_spread(values, floor=0.0):
    """Largest pairwise relative gap within ``values``."""
    return max((relative_gap(a, b, floor) for a, b in combinations(values, 2)), default=0.0)


def _noise_floor(summaries):
    # Estimates that are zero up to rounding (a perfect match) would otherwise
    # look infinitely unstable in relative terms.
    scale = [abs(v) for s in summaries for v in (s.tau_hat, s.tau_hat_adj, s.sigma_tau)
             if np.isfinite(v)]
    return NOISE * max(scale, default=0.0)


def classify_mode(summaries, pc):
    """Case label (``"i"``, ``"ii"``, ``"iii"``) and evidence for one grow mode."""
    n = len(summaries)
    floor = _noise_floor(summaries)
    low = [s.split for s in summaries if s.pct_over_threshold < pc.pct_low]
    gap = [s.split for s in summaries
           if relative_gap(s.tau_hat, s.tau_hat_adj, floor) > pc.adjustment_stability]
    high = [s for s in summaries if s.pct_over_threshold >= pc.pct_high]
    evidence = {"splits": [s.split for s in summaries], "low_pct_splits": low,
                "adjustment_gap_splits": gap, "high_pct_splits": [s.split for s in high]}
    if len(low) > n / 2 and len(gap) > n / 2:
        return "i", evidence
    if len(high) > n / 2:
        iters = float(np.mean([s.avg_iterations for s in high]))
        spread = max_spread([s.tau_hat for s in high], floor)
        evidence.update(mean_iterations_high=iters, tau_spread_high=spread)
        if iters <= pc.iter_low and spread <= pc.adjustment_stability:
            return "ii", evidence
    return "iii", evidence


def combine_cases(cases):
    values = set(cases.values())
    for c in ("ii", "i"):
        if c in values:
            return c
    return "iii"


@dataclass
class ProtocolPass:
    label: str
    replications: int
    summaries: dict  # grow mode -> list of RunSummary
    cases: dict
    evidence: dict

    @property
    def case(self):
        return combine_cases(self.cases)

    def to_dict(self):
        return {"label": self.label, "replications": self.replications, "case": self.case,
                "cases": self.cases, "evidence": self.evidence,
                "summaries": {m: [s.to_dict() for s in ss] for m, ss in self.summaries.items()}}


@dataclass
class Verdict:
    case: str
    estimates: list = field(default_factory=list)
    evidence: list = field(default_factory=list)
    iter_flag_history: list = field(default_factory=list)
    passes: list = field(default_factory=list)

    @property
    def exit_code(self):
        return EXIT_CODES[self.case]

    def to_dict(self):
        return {"version": VERDICT_VERSION, "case": self.case, "exit_code": self.exit_code,
                "evidence": self.evidence, "iter_flag_history": self.iter_flag_history,
                "estimates": [s.to_dict() for s in self.estimates],
                "passes": [p.to_dict() for p in self.passes]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def report(self):
        lines = [f"verdict: {self.case} (exit code {self.exit_code})"]
        for p in self.passes:
            lines.append(f"pass {p.label}: R={p.replications} case {p.case} "
                         f"({', '.join(f'{m}: {c}' for m, c in p.cases.items())})")
            for mode, ss in p.summaries.items():
                for s in ss:
                    lines.append(f"  {mode:8s} split {s.split:3d}  %o.t. {s.pct_label:>5s}  "
                                 f"iter {s.avg_iterations:5.1f}  tau {s.tau_hat:10.1f}  "
                                 f"tau' {s.tau_hat_adj:10.1f}")
        for e in self.evidence:
            lines.append(f"note: {e}")
        if self.estimates:
            lines.append("final estimates:")
            for s in self.estimates:
                lines.append(f"  {s.grow_on:8s} split {s.split:3d}  tau {s.tau_hat:.1f} "
                             f"({s.ci_tau[0]:.1f} : {s.ci_tau[1]:.1f})  tau' {s.tau_hat_adj:.1f}")
        return "\n".join(lines)


def _grid(sample, base, modes, splits, R, seed, workers, mu0, dataset):
    out = {}
    for mode in modes:
        rows = []
        for split in splits:
            cfg = base.with_(grow_on=mode, minsplit=split, replications=R, master_seed=seed)
            rows.append(run(sample, cfg, workers, mu0, dataset).summary)
            logger.info("%s split %d: %%o.t.=%s iterations=%.1f", mode, split,
                        rows[-1].pct_label, rows[-1].avg_iterations)
        out[mode] = rows
    return out


def _classify(label, R, summaries, pc):
    cases, evidence = {}, {}
    for mode, ss in summaries.items():
        cases[mode], evidence[mode] = classify_mode(ss, pc)
    return ProtocolPass(label, R, summaries, cases, evidence)


def run_protocol(sample, base_config=None, protocol_config=None, workers=1, dataset=""):
    """Run the matchability protocol and return a :class:`Verdict`."""
    base = base_config or RrpConfig()
    pc = protocol_config or ProtocolConfig()
    mu0 = fit_mu0(sample, base.mu0_minsplit)
    seed = base.master_seed
    verdict = Verdict(case=AMBIGUOUS, iter_flag_history=[False])
    try:
        first = _classify("initial", pc.initial_R,
                          _grid(sample, base, pc.modes, pc.splits, pc.initial_R,
                                derive_seed(seed, 1), workers, mu0, dataset), pc)
        verdict.passes.append(first)
        case = first.case
        if case == "i":
            verdict.case = NOT_MATCHABLE
            verdict.evidence.append("low over-threshold share with unstable adjustment")
            return verdict

        verdict.iter_flag_history.append(True)
        if case == "ii":
            ii_modes = [m for m in pc.modes if first.cases[m] == "ii"]
            size = {"treated": sample.n_T, "controls": sample.n_C}
            mode = max(ii_modes, key=lambda m: size[m])
            keep = [s.split for s in first.summaries[mode] if s.pct_over_threshold >= pc.pct_high]
            confirm = _classify("confirmation", pc.confirm_R,
                                _grid(sample, base, (mode,), keep, pc.confirm_R,
                                      derive_seed(seed, 2), workers, mu0, dataset), pc)
        else:
            confirm = _classify("repeat", pc.confirm_R,
                                _grid(sample, base, pc.modes, pc.splits, pc.confirm_R,
                                      derive_seed(seed, 3), workers, mu0, dataset), pc)
        verdict.passes.append(confirm)
        final = confirm.case
        if final == "ii":
            verdict.case = MATCHABLE
            verdict.estimates = [s for m in confirm.summaries if confirm.cases[m] == "ii"
                                 for s in confirm.summaries[m]]
        elif final == "i":
            verdict.case = NOT_MATCHABLE
            verdict.evidence.append("confirmation run: low over-threshold share with "
                                    "unstable adjustment")
        else:
            verdict.case = AMBIGUOUS
            verdict.evidence.append("indicators inconclusive after a second pass; matching "
                                    "does not suit this sample")
    except AllReplicationsFailed as exc:
        verdict.case = NOT_MATCHABLE
        verdict.evidence.append(f"no replication matched any treated unit: {exc}")
    return verdict
