"""Command line entry point ``stab``.

Exit codes: 0 all checks pass, 2 a property check or verdict failed,
3 configuration error, 4 numerical non-convergence. ``STAB_LOG`` sets
the log level (DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import runner
from .config import ConfigError, load_scenario
from .report import EXIT_CONFIG, EXIT_OK, EXIT_PROPERTY, revalidate

log = logging.getLogger("stab")


def _parse_values(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stab", description="Sample-and-hold stabilization of particle measures.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="select parameters, run the closed loop, write artifacts")
    s.add_argument("config")
    s.add_argument("--out", default="out")
    s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    s.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; simulate is single-process")

    v = sub.add_parser("verify", help="run randomized property suites")
    v.add_argument("config")
    v.add_argument("--suite", choices=runner.SUITES, default="all")
    v.add_argument("--out", default="out")
    v.add_argument("--seed", type=int, default=None)

    h = sub.add_parser("shells", help="dump the shell table (global mode)")
    h.add_argument("config")
    h.add_argument("--out", default="out")

    w = sub.add_parser("sweep", help="simulate over a list of values of one parameter")
    w.add_argument("config")
    w.add_argument("--axis", required=True, choices=sorted(runner.SWEEP_AXES))
    w.add_argument("--values", required=True, type=_parse_values, help="comma separated, e.g. 25,50,100")
    w.add_argument("--out", default="out")
    w.add_argument("--jobs", type=int, default=1)

    r = sub.add_parser("revalidate", help="re-check a simulate output directory from its files")
    r.add_argument("out_dir")
    return p


def _summary(rep) -> None:
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:32s} trials={c.trials:<6d} worst_margin={c.worst_margin:.6g}")
    if rep.verdicts:
        for v in rep.verdicts["verdicts"]:
            print(f"{v['status'].upper():5s} verdict {v['name']:24s} margin={v['margin']}")
    for n in rep.notes:
        print(f"note: {n}")
    if rep.error:
        print(f"error: {rep.error}", file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STAB_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "revalidate":
        try:
            ok, problems = revalidate(args.out_dir)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for msg in problems:
            print(msg)
        print("consistent" if ok else "inconsistent")
        return EXIT_OK if ok else EXIT_PROPERTY
    try:
        sc = load_scenario(args.config)
        if getattr(args, "seed", None) is not None:
            sc = sc.replace(seed=args.seed)
        out = Path(args.out)
        if args.command == "simulate":
            rep = runner.simulate(sc, out)
        elif args.command == "verify":
            rep = runner.verify(sc, args.suite, out)
        elif args.command == "shells":
            rep = runner.shells(sc, out)
        else:
            rows = runner.sweep(sc, args.axis, args.values, out, args.jobs)
            print(json.dumps(rows, indent=1, default=str))
            return EXIT_OK if all(r["exit_code"] == EXIT_OK for r in rows) else EXIT_PROPERTY
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _summary(rep)
    print(f"report: {out / 'report.json'}  exit={rep.exit_code}")
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
