"""Command line entry point: ``bcmon run | sweep | faultprob``.

Exit codes: 0 success, 1 an invariant was violated, 2 bad input.
Set ``BCMON_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from bcmon import faultprob
from bcmon.harness import (
    ScenarioError,
    Scenario,
    SweepAborted,
    check_determinism,
    format_table,
    parse_axis,
    run,
    sweep,
)

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
LOG_ENV = "BCMON_LOG"


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _cmd_run(args: argparse.Namespace) -> int:
    sc = Scenario.from_file(args.scenario)
    if args.check_determinism:
        same, why = check_determinism(sc)
        print(f"determinism: {why}")
        if not same:
            return EXIT_VIOLATION
    res = run(sc, parallel=True if args.parallel else None, wall_clock=args.wall_clock or None)
    if args.out:
        Path(args.out).write_text(res.report_json() + "\n")
    if args.trace:
        Path(args.trace).write_text("\n".join(res.trace_lines()) + "\n")
    print(res.summary())
    return EXIT_OK if res.ok else EXIT_VIOLATION


def _cmd_sweep(args: argparse.Namespace) -> int:
    template = Scenario.from_file(args.template)
    axes = [parse_axis(a) for a in args.axis]
    try:
        rows = sweep(template, axes, out_path=args.out, parallel=True if args.parallel else None)
    except SweepAborted as exc:
        print(format_table(exc.rows))
        print(f"sweep aborted: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    print(format_table(rows))
    return EXIT_OK


def _cmd_faultprob(args: argparse.Namespace) -> int:
    try:
        model = faultprob.FaultModel(args.N, args.F, args.T)
        p = faultprob.fault_probability_exact(model, args.K)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    print(f"{float(p):.6f}")
    if args.exact:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcmon", description="Offline blockchain relay simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("scenario")
    r.add_argument("--out", help="write the JSON report here")
    r.add_argument("--trace", help="write the canonical JSON-lines trace here")
    r.add_argument("--parallel", action="store_true", help="execute same-time events on a thread pool")
    r.add_argument("--wall-clock", action="store_true", help="also record wall-clock run time")
    r.add_argument("--check-determinism", action="store_true",
                   help="run sequential and parallel first and compare byte for byte")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run a scenario template over a parameter grid")
    s.add_argument("template")
    s.add_argument("--axis", action="append", default=[],
                   help="name=lo:hi:step or name=v1,v2 (nodes, clients, transactions, payload_size "
                        "or a dotted scenario path)")
    s.add_argument("--out", help="append one JSON line per grid point here")
    s.add_argument("--parallel", action="store_true")
    s.set_defaults(func=_cmd_sweep)

    f = sub.add_parser("faultprob", help="probability that a sampled committee has too many faulty members")
    f.add_argument("N", type=int, help="population size")
    f.add_argument("F", type=int, help="faulty members in the population")
    f.add_argument("T", type=int, help="committee size")
    f.add_argument("K", type=int, help="committee fails when it holds at least K faulty members")
    f.add_argument("--exact", action="store_true", help="also print the exact rational")
    f.set_defaults(func=_cmd_faultprob)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
