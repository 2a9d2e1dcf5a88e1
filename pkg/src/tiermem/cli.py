"""``bench`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from .bench import EXPERIMENTS, InvariantViolation, run_experiment, run_scenario
from .config import load_config
from .errors import TierMemError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Tiered memory simulator harness")
    parser.add_argument("-v", "--verbose", action="store_true", help="log engine events")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("config", help="scenario file ([section] key = value)")
    run.add_argument("--out", default=None, help="directory for metrics.csv and summary.txt")

    exp = sub.add_parser("experiment", help="run a built-in experiment")
    exp.add_argument("name", choices=sorted(EXPERIMENTS) + ["all"])
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--out", default=None, help="output directory (default: ./out/<name>)")

    sub.add_parser("list", help="list built-in experiments")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list":
            for name in sorted(EXPERIMENTS):
                print(name)
            return 0
        if args.command == "run":
            cfg = load_config(args.config)
            out = args.out or f"out/{cfg.name}"
            report, _ = run_scenario(cfg, out)
            print(f"{cfg.name}: {report.ops} ops, throughput {report.throughput:.0f} ops/s, "
                  f"p99 {report.p99_latency:.1f}, local ratio {report.local_ratio:.3f} -> {out}")
            return 0
        names = sorted(EXPERIMENTS) if args.name == "all" else [args.name]
        for name in names:
            out = args.out if args.out and len(names) == 1 else f"{args.out or 'out'}/{name}"
            rows = run_experiment(name, seed=args.seed, out_dir=out)
            print(f"{name}: {len(rows)} rows -> {out}/metrics.csv")
        return 0
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except TierMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
