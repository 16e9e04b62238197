"""Command-line entry point.

    xpsim run <config.json> [--seed N] [--full] [--out path.csv] [--jobs N]
    xpsim summarize <rows.csv>
    xpsim table5 [--out path.csv]

Exit codes: 0 on success, 2 on configuration errors (the message names the
offending field), 1 on any other failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness, state_model


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed_base=args.seed)
    rows = harness.run_experiment(cfg, full=args.full, jobs=args.jobs)
    out_path = harness.default_out_path(cfg.scenario, args.out)
    harness.write_csv(rows, out_path)
    print(f"wrote {len(rows)} rows to {out_path}")
    print(harness.summarize(rows), end="")
    return 0


def _cmd_summarize(args: argparse.Namespace) -> int:
    rows = harness.read_csv(args.csv)
    if not rows:
        print("no rows found", file=sys.stderr)
        return 1
    print(harness.summarize(rows), end="")
    return 0


def _cmd_table5(args: argparse.Namespace) -> int:
    print(state_model.table_text(), end="")
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(state_model.table_csv())
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xpsim",
        description="Transport and collective simulation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario config and write CSV rows")
    run.add_argument("config", help="path to a scenario JSON file")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config's base seed")
    run.add_argument("--full", action="store_true",
                     help="scale tensor sizes up by the config's full-scale multiplier")
    run.add_argument("--out", default=None,
                     help="output CSV path (default: $XPSIM_OUT_DIR/<scenario>.csv)")
    run.add_argument("--jobs", type=int, default=None,
                     help="worker processes (default: one per CPU)")
    run.set_defaults(fn=_cmd_run)

    summ = sub.add_parser("summarize", help="print per-cell stats from a rows CSV")
    summ.add_argument("csv", help="path to a CSV produced by 'run'")
    summ.set_defaults(fn=_cmd_summarize)

    table = sub.add_parser("table5", help="print the QP-state scalability table")
    table.add_argument("--out", default=None, help="also write the table as CSV")
    table.set_defaults(fn=_cmd_table5)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
