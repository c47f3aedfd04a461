"""Command-line entry point: ``run``, ``rates``, ``coverage`` and ``selftest``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .diagnostics import CoverageConfig, coverage_experiment, known_truth, write_coverage_csv
from .harness import (
    RATES_COLUMNS,
    ExperimentConfig,
    emit_report,
    rates_from_errors,
    read_errors_csv,
    run_experiment,
)


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    report = run_experiment(cfg, threads=args.threads)
    out = emit_report(report, args.out)
    for r in report.rates:
        print(f"{r.proposal:>8s}  p={r.p:<4g} slope={r.slope:+.3f}  residual={r.residual:.3f}")
    for c in report.failures:
        print(f"FAILED CELL {c.error}", file=sys.stderr)
    print(f"report written to {out}")
    return 1 if report.failures else 0


def _cmd_rates(args) -> int:
    src = Path(args.inp)
    fits = rates_from_errors(read_errors_csv(src / "errors.csv"))
    print("  ".join(RATES_COLUMNS))
    for r in fits:
        print(f"{r.proposal}  {r.p:g}  {r.slope:.6f}  {r.intercept:.6f}  {r.residual:.6f}")
    return 0


def _cmd_coverage(args) -> int:
    cfg = CoverageConfig.from_json(args.config)
    truth = cfg.truth if cfg.truth is not None else known_truth(cfg.model)
    result = coverage_experiment(cfg, truth, threads=args.threads)
    path = write_coverage_csv(result, args.out)
    print(f"nominal {result.nominal:.4f}  empirical {result.empirical:.4f}  ({result.hits}/{result.meta_reps})")
    print(f"written to {path}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rqmc-snis", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per cell")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a replicated L_p-error experiment")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (RQMC_SNIS_THREADS overrides)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("rates", help="refit convergence slopes from errors.csv")
    p.add_argument("--in", dest="inp", required=True, help="directory holding errors.csv")
    p.set_defaults(func=_cmd_rates)

    p = sub.add_parser("coverage", help="empirical coverage of Student-t intervals")
    p.add_argument("--config", required=True, help="JSON coverage config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
