"""Command-line interface.

Subcommands
-----------
``run``
    Replication runs over grow modes and split values; prints one summary
    row per combination and optionally writes CSV, JSON and PGM files.
``proximity``
    Same runs, focused on the proximity matrix: writes the images (and
    optionally text dumps) and prints per-row coverage statistics.
``protocol``
    Matchability protocol; the verdict decides the exit status.
``naive``
    Difference in means between treated and controls.

Exit status
-----------
0 on success (``protocol``: Matchable), 2 NotMatchable, 3 Ambiguous,
1 on any data or computation error and 64 on invalid arguments.
"""

import argparse
import csv
import io
import json
import logging
import secrets
import sys
import warnings
from pathlib import Path

from . import __version__
from .balance import DEFAULT_ALPHA
from .dataset import get_schema, naive_target, pooled_sd, resolve_sample
from .estimators import DENOMINATORS, VARIANCE_FORMS, RunSummary, fit_mu0, summaries_to_json
from .exceptions import AllReplicationsFailed, RRPError
from .protocol import DEFAULT_SPLITS, ProtocolConfig, run_protocol
from .proximity import AllZeroWarning, dump_text, render, row_quality
from .rrp import BALANCE_SETS, GROW_MODES, GROW_SETS, REPLACEMENT, RrpConfig, default_workers, run

logger = logging.getLogger("rrpmatch")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 64

TABLE_HEADER = ("grow_on", "split", "tau", "sd(tau)", "tau'", "sd(tau')", "T", "C", "%o.t.",
                "SW", "SW'", "CI(tau)", "CI(tau')", "iter")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments, which would read as a
    # NotMatchable verdict; use a distinct status instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_splits(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"split values must be integers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("at least one split value is required")
    if min(values) < 2:
        raise argparse.ArgumentTypeError("split values must be at least 2")
    return tuple(values)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return v


def _alpha(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", required=True,
                   help="CSV file or bundled sample name (LL, DW, ST, DWvsPSID, ...)")
    g.add_argument("--controls", help="take the control units from this CSV / bundled name")
    g.add_argument("--schema", default="lalonde",
                   help="registered schema name or path to a JSON schema (default: lalonde)")


def _rrp_args(p, grow_on=True, replications=True):
    g = p.add_argument_group("replications")
    if grow_on:
        g.add_argument("--grow-on", choices=GROW_MODES + ("both",), default="treated")
    g.add_argument("--splits", type=parse_splits, default=DEFAULT_SPLITS,
                   help="comma-separated minsplit values (default: 50,32,20,16,8,4,2)")
    if replications:
        g.add_argument("--replications", type=_positive_int, default=250)
    g.add_argument("--max-iterations", type=_positive_int, default=50)
    g.add_argument("--alpha", type=_alpha, default=DEFAULT_ALPHA)
    g.add_argument("--replacement", choices=REPLACEMENT, default="without")
    g.add_argument("--mu0-minsplit", type=_positive_int, default=20)
    g.add_argument("--denominator", choices=DENOMINATORS, default="matched")
    g.add_argument("--variance-form", choices=VARIANCE_FORMS, default="pooled")
    g.add_argument("--grow-set", choices=GROW_SETS, default="full")
    g.add_argument("--balance-on", choices=BALANCE_SETS, default="leaf")
    g.add_argument("--minbucket", type=_positive_int, default=None,
                   help="smallest child node size (default: round(split/3))")
    g.add_argument("--seed", type=_seed, default=None,
                   help="master seed; drawn from system entropy and reported when omitted")
    g.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: available CPUs)")


def _image_args(p, required=False):
    g = p.add_argument_group("proximity images")
    g.add_argument("--proximity-out", required=required,
                   help="PGM path; with several runs, '{grow_on}' and '{split}' placeholders "
                        "are filled in, otherwise a suffix is appended")
    g.add_argument("--rescale-width", type=_positive_int, default=None,
                   help="resample the control axis to this many columns")
    g.add_argument("--matrix-out", help="plain-text dump of the counts (same path rules)")
    g.add_argument("--literal-proximity", action="store_true",
                   help="normalize proximity weights by the count of nonzero entries")


def build_parser():
    parser = _Parser(prog="rrpmatch", description="Matching by random recursive partitioning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress on stderr (repeat for more detail)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="replication runs with a summary table")
    _data_args(p)
    _rrp_args(p)
    _image_args(p)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("proximity", help="proximity images of replication runs")
    _data_args(p)
    _rrp_args(p)
    _image_args(p, required=True)
    p.set_defaults(func=cmd_proximity)

    p = sub.add_parser("protocol", help="matchability verdict")
    _data_args(p)
    _rrp_args(p, grow_on=False, replications=False)
    g = p.add_argument_group("protocol")
    g.add_argument("--initial-replications", type=_positive_int, default=100)
    g.add_argument("--confirm-replications", type=_positive_int, default=250)
    g.add_argument("--pct-high", type=float, default=90.0)
    g.add_argument("--pct-low", type=float, default=60.0)
    g.add_argument("--iter-low", type=float, default=10.0)
    g.add_argument("--adjustment-stability", type=float, default=0.25)
    g.add_argument("--out-json")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("naive", help="difference in means")
    _data_args(p)
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_naive)
    return parser


# -- helpers ------------------------------------------------------------------

def _load(args):
    return resolve_sample(args.data, get_schema(args.schema), args.controls)


def _resolve_seed(args):
    if args.seed is None:
        args.seed = secrets.randbits(63)
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _base_config(args):
    return RrpConfig(max_iterations=args.max_iterations, alpha=args.alpha,
                     replacement=args.replacement, master_seed=_resolve_seed(args),
                     replications=getattr(args, "replications", 250),
                     mu0_minsplit=args.mu0_minsplit, denominator=args.denominator,
                     variance_form=args.variance_form, grow_set=args.grow_set,
                     balance_on=args.balance_on, minbucket=args.minbucket)


def _modes(args):
    return GROW_MODES if args.grow_on == "both" else (args.grow_on,)


def output_path(template, grow_on, split, single):
    """Path for one (grow_on, split) output given the user's template."""
    if "{" in template:
        return Path(template.format(grow_on=grow_on, split=split))
    path = Path(template)
    if single:
        return path
    return path.with_name(f"{path.stem}_{grow_on}_{split}{path.suffix}")


def _execute(args, sample, dataset, keep_failed=False):
    base = _base_config(args)
    mu0 = fit_mu0(sample, base.mu0_minsplit)
    workers = args.threads or default_workers()
    outcomes = []
    for mode in _modes(args):
        for split in args.splits:
            cfg = base.with_(grow_on=mode, minsplit=split)
            logger.info("running %s split %d (R=%d)", mode, split, cfg.replications)
            try:
                outcomes.append(run(sample, cfg, workers, mu0, dataset,
                                    literal_proximity=args.literal_proximity))
            except AllReplicationsFailed as exc:
                if not keep_failed:
                    raise
                _warn(f"{mode} split {split}: {exc}")
                outcomes.append(exc.outcome)
    return outcomes


def _warn(message):
    print(f"rrpmatch: warning: {message}", file=sys.stderr)


def _write_images(args, outcomes):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AllZeroWarning)
        written = _write_images_inner(args, outcomes)
    for w in caught:
        _warn(w.message)
    return written


def _write_images_inner(args, outcomes):
    single = len(outcomes) == 1
    written = []
    for o in outcomes:
        mode, split = o.config.grow_on, o.config.minsplit
        if args.proximity_out:
            path = output_path(args.proximity_out, mode, split, single)
            render(o.proximity, path, args.rescale_width)
            written.append(path)
        if args.matrix_out:
            path = output_path(args.matrix_out, mode, split, single)
            dump_text(o.proximity, path)
            written.append(path)
    for path in written:
        logger.info("wrote %s", path)
    return written


def format_table(summaries):
    """Aligned plain-text table, one row per summary."""
    rows = [TABLE_HEADER]
    for s in summaries:
        r = s.csv_row()
        # csv_row: dataset, grow_on, split, tau, sd, tau', sd', T, C, %ot, SW, SW', CI, CI', iter
        rows.append(tuple(r[1:15]))
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_HEADER))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def write_csv(summaries, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RunSummary.CSV_COLUMNS)
    for s in summaries:
        w.writerow(s.csv_row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _metadata(args, sample):
    return {"data": str(args.data), "controls": args.controls, "schema": str(args.schema),
            "n_T": sample.n_T, "n_C": sample.n_C, "seed": args.seed,
            "splits": list(args.splits)}


# -- subcommands --------------------------------------------------------------

def cmd_run(args):
    sample = _load(args)
    outcomes = _execute(args, sample, str(args.data))
    summaries = [o.summary for o in outcomes]
    print(format_table(summaries))
    if args.out_csv:
        write_csv(summaries, args.out_csv)
    if args.out_json:
        Path(args.out_json).write_text(
            summaries_to_json(summaries, _metadata(args, sample)) + "\n", encoding="utf-8")
    _write_images(args, outcomes)
    return EXIT_OK


def cmd_proximity(args):
    sample = _load(args)
    outcomes = _execute(args, sample, str(args.data), keep_failed=True)
    _write_images(args, outcomes)
    header = ("grow_on", "split", "R", "rows covered", "mean nonzero", "mean max share")
    rows = [header]
    for o in outcomes:
        q = row_quality(o.proximity)
        rows.append((o.config.grow_on, str(o.config.minsplit), str(o.proximity.R),
                     f"{100 * q.covered_fraction:.1f}%", f"{q.nonzero.mean():.2f}",
                     f"{q.max_share.mean():.3f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        print("  ".join([r[0].ljust(widths[0])]
                        + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]).rstrip())
    return EXIT_OK


def cmd_protocol(args):
    sample = _load(args)
    base = _base_config(args)
    try:
        pc = ProtocolConfig(initial_R=args.initial_replications,
                            confirm_R=args.confirm_replications, splits=args.splits,
                            pct_high=args.pct_high, pct_low=args.pct_low,
                            iter_low=args.iter_low,
                            adjustment_stability=args.adjustment_stability)
    except ValueError as exc:
        raise UsageError(str(exc))
    verdict = run_protocol(sample, base, pc, args.threads or default_workers(),
                           dataset=str(args.data))
    print(verdict.report())
    if args.out_json:
        doc = verdict.to_dict()
        doc["metadata"] = _metadata(args, sample)
        Path(args.out_json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return verdict.exit_code


def cmd_naive(args):
    sample = _load(args)
    att, se = naive_target(sample)
    sd = pooled_sd(sample)
    print(f"{'n_T':<10}{sample.n_T:>12d}")
    print(f"{'n_C':<10}{sample.n_C:>12d}")
    print(f"{'ATT':<10}{att:>12.2f}")
    print(f"{'SE':<10}{se:>12.2f}")
    print(f"{'pooled SD':<10}{sd:>12.2f}")
    if args.out_json:
        doc = {"version": 1, "data": str(args.data), "n_T": sample.n_T, "n_C": sample.n_C,
               "att": att, "se": se, "pooled_sd": sd}
        Path(args.out_json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rrpmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RRPError, OSError, KeyError, ValueError) as exc:
        print(f"rrpmatch: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
