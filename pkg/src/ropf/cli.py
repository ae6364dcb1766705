"""Command line entry point: ``ropf solve``, ``ropf bench`` and ``ropf cliques``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .chordal import decompose, dump_cliques
from .experiment import VARIANTS, RunConfig, format_table, run_experiment
from .matpower import CaseFormatError, load_case

log = logging.getLogger("ropf")


def _run_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--variant", default="MAXkshunts", choices=VARIANTS)
    ap.add_argument("-k", "--k", type=int, default=4, help="budget for MAXkshunts / MAXkmoves")
    ap.add_argument("--u0", default="relaxation", choices=("relaxation", "zeros", "ones"),
                    help="initial shunt state for MAXkmoves")
    ap.add_argument("--seed", type=int, default=42, help="seed of the GENmoves plans (PCG64)")
    ap.add_argument("--scenarios", type=int, default=5, help="GENmoves plans per instance")
    ap.add_argument("--l", type=float, default=None, help="fix u* <= l to 0 before branching")
    ap.add_argument("--u", type=float, default=None, help="fix u* >= u to 1 before branching")
    ap.add_argument("--gap-tol", type=float, default=1e-4)
    ap.add_argument("--sdp-tol", type=float, default=1e-7)
    ap.add_argument("--time-limit", type=float, default=3600.0, help="B&B time limit in seconds")
    ap.add_argument("--k-max", type=int, default=1, help="clique merging passes")
    ap.add_argument("--min-k", action="store_true", help="smallest k for which the heuristic succeeds")
    ap.add_argument("--no-timings", action="store_true", help="leave the time column empty")
    ap.add_argument("--csv", default=None, help="write the rows as CSV")
    ap.add_argument("--json", default=None, help="write rows and candidates as JSON")


def _config(args, cases) -> RunConfig:
    return RunConfig(
        cases=cases,
        variant=args.variant,
        k=args.k,
        u0=args.u0,
        seed=args.seed,
        scenarios=args.scenarios,
        l=args.l,
        u=args.u,
        gap_tol=args.gap_tol,
        sdp_tol=args.sdp_tol,
        time_limit_s=args.time_limit,
        k_max=args.k_max,
        min_k=args.min_k,
        timings=not args.no_timings,
        csv_path=args.csv,
        json_path=args.json,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ropf", description="Reactive OPF with shunt switching")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("solve", help="bounds and B&B for one instance")
    s.add_argument("case", help="MATPOWER file or bundled case name")
    _run_args(s)

    b = sub.add_parser("bench", help="batch over several instances")
    b.add_argument("cases", nargs="+")
    _run_args(b)

    c = sub.add_parser("cliques", help="dump the clique decomposition")
    c.add_argument("case")
    c.add_argument("--k-max", type=int, default=1)
    c.add_argument("-o", "--output", default=None)
    return ap


def _cliques(args) -> int:
    net = load_case(args.case)
    deco = decompose(net, args.k_max)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        dump_cliques(deco, out)
    finally:
        if out is not sys.stdout:
            out.close()
    links = sum(lk.entries for lk in deco.links)
    print(json.dumps(dict(cliques=len(deco.cliques), max_clique=deco.max_clique, link_entries=links)),
          file=sys.stderr)
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(name)s: %(message)s")

    if args.cmd == "cliques":
        try:
            return _cliques(args)
        except (OSError, CaseFormatError, ValueError) as exc:
            print(f"ropf: {exc}", file=sys.stderr)
            return 2

    cases = [args.case] if args.cmd == "solve" else args.cases
    try:
        cfg = _config(args, cases)
    except ValueError as exc:
        print(f"ropf: {exc}", file=sys.stderr)
        return 2
    if args.cmd == "solve" and not (Path(args.case).exists() or _bundled(args.case)):
        print(f"ropf: no such case {args.case!r}", file=sys.stderr)
        return 2
    rows = run_experiment(cfg)
    sys.stdout.write(format_table(rows))
    return 0


def _bundled(name: str) -> bool:
    try:
        load_case(name)
    except (OSError, CaseFormatError, ValueError):
        return False
    return True


if __name__ == "__main__":
    sys.exit(main())
