"""Command-line entry point: ``abl-lab <command> [--config PATH] ...``.

Exit codes: 0 success, 1 configuration or path error, 2 runtime or training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, load_config, parse_config
from .errors import AblLabError, ConfigError, PathError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("gen-data", "poison", "train", "isolate", "unlearn", "experiment", "sweep")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abl-lab", description="Backdoor poisoning and anti-backdoor learning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI experiment config; built-in defaults when omitted")
    p.add_argument("--seed", type=_u64, help="master seed (overrides [experiment] seed)")
    p.add_argument("--out", help="output directory (overrides [experiment] out)")
    p.add_argument("--mode", choices=harness.MODES, default="abl", help="training mode for 'train'")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="section.key=value, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"experiment.out={args.out}")
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", "<defaults>", overrides)


def run(args) -> object:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "gen-data":
        return harness.cmd_gen_data(cfg)
    if cmd == "poison":
        return harness.cmd_poison(cfg)
    if cmd == "train":
        return harness.cmd_train(cfg, args.mode)
    if cmd == "isolate":
        return harness.cmd_isolate(cfg)
    if cmd == "unlearn":
        return harness.cmd_unlearn(cfg)
    if cmd == "experiment":
        return harness.cmd_experiment(cfg).to_dict()
    records = harness.cmd_sweep(cfg)
    failed = [r for r in records if r.status != "ok"]
    summary = {"runs": len(records), "failed": len(failed), "table": str(Path(cfg.out) / "sweep.csv")}
    if failed:
        raise SweepFailed(summary)
    return summary


class SweepFailed(AblLabError):
    def __init__(self, summary: dict):
        super().__init__(f"{summary['failed']} of {summary['runs']} sweep runs failed")
        self.summary = summary


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ConfigError, PathError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SweepFailed as exc:
        print(json.dumps(exc.summary, indent=2, sort_keys=True))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AblLabError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
