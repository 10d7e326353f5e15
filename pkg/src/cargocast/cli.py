"""Command-line entry points: generate, backtest, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CargocastError
from .harness import cmd_report_text, generate_csv, parse_run_config, parse_synthetic_config, run_backtest


def _load_json(path: str) -> dict:
    with Path(path).open() as fh:
        return json.load(fh)


def cmd_generate(args) -> int:
    raw = _load_json(args.config)
    generate_csv(parse_synthetic_config(raw), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_backtest(args) -> int:
    raw = _load_json(args.config)
    config = parse_run_config(raw)
    result = run_backtest(config, args.out, config_echo=raw)
    print(f"run artifacts in {result.out_dir}")
    print((result.out_dir / "report.txt").read_text(), end="")
    return 0


def cmd_report(args) -> int:
    print(cmd_report_text(args.run), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cargocast",
        description="Weekly per-O&D cargo demand forecasting: synthetic data, backtests, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic bookings CSV")
    gen.add_argument("--config", required=True, help="synthetic config JSON")
    gen.add_argument("--out", required=True, help="output CSV path")
    gen.set_defaults(func=cmd_generate)

    back = sub.add_parser("backtest", help="run the full train/select/forecast/report pipeline")
    back.add_argument("--config", required=True, help="run config JSON")
    back.add_argument("--out", required=True, help="output run directory")
    back.set_defaults(func=cmd_backtest)

    rep = sub.add_parser("report", help="print the report tables of a finished run")
    rep.add_argument("--run", required=True, help="run directory")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CargocastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
