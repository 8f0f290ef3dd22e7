"""Command-line entry point: fit, cv, simulate, benchmark and diagnose.

Results go to standard output (or the files named by the flags); progress
and warnings go to standard error.

Exit codes: 0 success, 2 bad input or flags, 3 fit did not converge,
4 every candidate rank failed during cross-validation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import InputError, PartitionError, load_counts, save_counts, save_mask
from .factorize import FactorModel, FitOptions, zipfa_fit
from .rankcv import CvConfig, SelectionError, select_rank, write_cv_csv
from .sim import (
    L2_CONVENTION,
    CalibrationError,
    SimulationSpec,
    generate_counts,
    parse_setting,
    run_benchmark,
    setting_label,
    write_benchmark_csv,
    write_diagnostic_csv,
    zero_pattern_diagnostic,
)

logger = logging.getLogger("zipfa")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_CONVERGENCE = 3
EXIT_ALL_RANKS_FAILED = 4


class UsageError(ValueError):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def parse_ranks(text: str) -> tuple:
    """'a:b' (inclusive) or a comma list."""
    try:
        if ":" in text:
            a, b = (int(x) for x in text.split(":"))
            ranks = tuple(range(a, b + 1))
        else:
            ranks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rank range {text!r}; use a:b or a,b,c")
    if not ranks or min(ranks) < 1:
        raise argparse.ArgumentTypeError(f"bad rank range {text!r}; ranks must be >= 1 and a <= b")
    return ranks


def _float_list(text):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _fit_options(args) -> FitOptions:
    return FitOptions(max_outer_iterations=args.max_iter, rel_loglik_tol=args.tol)


def _open_out(path):
    if path is None or str(path) == "-":
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


# ------------------------------------------------------------------ commands


def cmd_fit(args) -> int:
    A = load_counts(args.input)
    n, m = A.shape
    if args.rank > min(n, m):
        raise UsageError(f"--rank {args.rank} exceeds min(n, m) = {min(n, m)}")
    model = zipfa_fit(A, args.rank, _fit_options(args))
    if args.output:
        model.save(args.output)
        logger.info("model written to %s", args.output)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "tau", "loglik", "iterations", "converged"])
    w.writerow([model.rank, repr(model.tau), repr(model.loglik), model.iterations,
                str(model.converged).lower()])
    if not model.converged:
        logger.warning("fit did not converge within %d outer iterations", args.max_iter)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_cv(args) -> int:
    A = load_counts(args.input)
    config = CvConfig(ranks=args.ranks, folds=args.folds, seed=args.seed,
                      options=_fit_options(args), repeats=args.repeats)
    try:
        result = select_rank(A, config, workers=args.threads)
    except SelectionError as exc:
        logger.error("%s", exc)
        return EXIT_ALL_RANKS_FAILED
    if result.invalid_ranks:
        logger.warning("ranks failed on every fold: %s", list(result.invalid_ranks))
    if result.dropped:
        logger.warning("dropped (repeat, fold) pairs: %s", list(result.dropped))
    if args.output:
        out, close = _open_out(args.output)
        try:
            write_cv_csv(result, config.folds, out)
        finally:
            if close:
                out.close()
    print(result.selected_rank)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = SimulationSpec(args.setting, args.zero_pct, seed=args.seed, n=args.n, m=args.m)
    data = generate_counts(spec)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    save_counts(data.A, outdir / "counts.csv")
    truth = FactorModel(data.U_true, data.V_true,
                        float("nan") if data.tau is None else data.tau, np.ones(spec.n))
    doc = truth.to_dict()
    doc.update(setting=setting_label(spec.setting), Lambda=data.Lambda_true.tolist(),
               sample_groups=data.sample_groups.tolist(),
               taxon_groups=data.taxon_groups.tolist(), mask="mask.csv")
    (outdir / "truth.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    save_mask(np.argwhere(data.inflation_mask), outdir / "mask.csv")
    manifest = {
        "setting": setting_label(spec.setting),
        "zero_pct": spec.target_zero_fraction,
        "seed": spec.seed,
        "n": spec.n,
        "m": spec.m,
        "tau": data.tau,
        "realized_inflated_fraction": float(data.inflation_mask.mean()),
        "files": {"counts": "counts.csv", "truth": "truth.json", "mask": "mask.csv"},
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n",
                                          encoding="utf-8")
    json.dump(manifest, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    for f in args.zero_pcts:
        if not 0 <= f < 1:
            raise UsageError(f"zero fraction {f} outside [0, 1)")
    methods = [x.strip().upper() for x in args.methods.split(",")]
    bad = [x for x in methods if x not in ("ZIPFA", "LOGSVD")]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose zipfa, logsvd")
    settings = [parse_setting(s) for s in args.settings.split(",")]
    records = run_benchmark(settings, args.zero_pcts, args.replicates, methods, seed=args.seed,
                            K=args.rank, opts=_fit_options(args), n=args.n, m=args.m,
                            workers=args.threads, offsets=args.offsets)
    failed = sum(not np.isfinite(r.l2_loss) for r in records)
    if failed:
        logger.warning("%d record(s) failed; see the l2_loss column", failed)
    out, close = _open_out(args.output)
    try:
        write_benchmark_csv(records, out, timings=args.timings)
    finally:
        if close:
            out.close()
    if close:
        meta = {
            "l2_convention": L2_CONVENTION,
            "seed": args.seed,
            "rank": args.rank,
            "n": args.n,
            "m": args.m,
            "timings": args.timings,
            "offsets": args.offsets,
        }
        Path(str(args.output) + ".meta.json").write_text(json.dumps(meta, indent=1) + "\n",
                                                         encoding="utf-8")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    A = load_counts(args.input)
    table, fit_flagged, fit_all = zero_pattern_diagnostic(A, threshold=args.threshold)
    out, close = _open_out(args.output)
    try:
        write_diagnostic_csv(table, {"flagged": fit_flagged, "all": fit_all}, A.taxon_ids, out)
    finally:
        if close:
            out.close()
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zipfa", description="Zero-inflated Poisson factor analysis of count matrices.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more progress output on stderr (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def fit_flags(p):
        p.add_argument("--max-iter", type=_positive_int, default=100,
                       help="outer iteration cap (default 100)")
        p.add_argument("--tol", type=_positive_float, default=1e-3,
                       help="relative log-likelihood change that stops the fit (default 1e-3)")

    def thread_flag(p):
        p.add_argument("--threads", type=_positive_int, default=default_threads(),
                       help="worker processes (default: available CPUs)")

    p = sub.add_parser("fit", help="fit a rank-K model")
    p.add_argument("--input", required=True, help="counts CSV")
    p.add_argument("--rank", type=_positive_int, required=True)
    p.add_argument("--output", help="model JSON to write")
    fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="choose the rank by cross-validated likelihood")
    p.add_argument("--input", required=True)
    p.add_argument("--ranks", type=parse_ranks, required=True, help="a:b or a,b,c")
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--repeats", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="CV table CSV to write")
    fit_flags(p)
    thread_flag(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--setting", required=True, help="1, 2, 3, 4, 5, 6.1 or 6.2")
    p.add_argument("--zero-pct", type=float, required=True,
                   help="target fraction of structural zeros")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=_positive_int, default=200, help="samples (default 200)")
    p.add_argument("--m", type=_positive_int, default=100, help="taxa (default 100)")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="ZIPFA against log-SVD on simulated data")
    p.add_argument("--settings", default="1")
    p.add_argument("--zero-pcts", type=_float_list, default=[0.0, 0.2, 0.4])
    p.add_argument("--replicates", type=_positive_int, default=20)
    p.add_argument("--methods", default="zipfa,logsvd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=_positive_int, default=3)
    p.add_argument("--n", type=_positive_int, default=200)
    p.add_argument("--m", type=_positive_int, default=100)
    p.add_argument("--offsets", choices=["known", "empirical"], default="known",
                   help="ZIPFA scaling: the generating N = 1 (default) or relative "
                        "library sizes from the simulated row sums")
    p.add_argument("--timings", action="store_true",
                   help="record wall-clock runtime_s (makes output non-reproducible)")
    p.add_argument("--output", help="results CSV (default stdout)")
    fit_flags(p)
    thread_flag(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("diagnose", help="per-taxon zero fraction against mean log count")
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="diagnostic CSV (default stdout)")
    p.add_argument("--threshold", type=float, default=2.5,
                   help="meanlog cutoff for the flagged fit (default 2.5)")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except (InputError, PartitionError, CalibrationError, UsageError, OSError, ValueError) as exc:
        print(f"zipfa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
