"""Command-line entry point: ``iuqval <command> --config run.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .pipeline import STAGES, PipelineError, load_config, run_stages

COMMANDS = (*STAGES, "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iuqval", description="Calibration, validation and BMA prediction pipeline.")
    parser.add_argument("command", choices=COMMANDS, help="stage to run, or 'all' for the full pipeline")
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", help="output directory (overrides the config and IUQVAL_OUT)")
    parser.add_argument("--seed-override", type=int, help="use this seed for every stage")
    parser.add_argument("--bias-mode", choices=("on", "off", "both"), help="override bias.modes")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    stages = STAGES if args.command == "all" else (args.command,)
    try:
        cfg = load_config(args.config, out=args.out, seed_override=args.seed_override, bias_mode=args.bias_mode)
        run_stages(cfg, stages)
    except PipelineError as exc:
        print(f"iuqval: error: {exc}", file=sys.stderr)
        return 2
    if args.command in ("report", "all"):
        print((Path(cfg.paths.output) / "report" / "summary.txt").read_text(encoding="utf-8"), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
