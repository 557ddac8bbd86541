"""Command line front end: run, sweep, validate, and report subcommands.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a config problem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import run_experiment


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="config file; defaults apply when omitted")
    parser.add_argument("--seed", type=int, metavar="INT",
                        help="override the config seed")
    parser.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    parser.add_argument("--threads", type=int, metavar="INT",
                        help="worker count, 0 means auto (PG_LAB_THREADS, then cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pglab",
        description="Joint-particle diffusion sampling experiments on analytic targets.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the configured experiment")
    _add_common(run)
    sweep = sub.add_parser("sweep", help="run a coupling-strength sweep")
    _add_common(sweep)
    val = sub.add_parser("validate", help="check a config and echo it, writing nothing")
    _add_common(val)
    rep = sub.add_parser("report", help="summarize a written report.json")
    rep.add_argument("--out", metavar="DIR", default="out",
                     help="directory holding report.json (default: out)")
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    if getattr(args, "threads", None) is not None:
        config.threads = args.threads
    return config


def _summarize(payload: dict, stream) -> None:
    print(f"kind: {payload['kind']}  seed: {payload['seed']}  "
          f"schema: {payload['schema']}", file=stream)
    for label, method in payload["methods"].items():
        parts = [f"{label}: n={method['n']} trials={method['trials']}"]
        for name, stats in method["summary"].items():
            mean = stats["mean"]
            if isinstance(mean, float):
                parts.append(f"{name}={mean:.4g}")
        print("  " + "  ".join(parts), file=stream)
    for key, value in payload.get("extras", {}).items():
        if isinstance(value, (int, float, str, bool)):
            print(f"  {key}: {value}", file=stream)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "report":
        path = os.path.join(args.out, "report.json")
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as err:
            print(f"error: cannot read {path}: {err}", file=sys.stderr)
            return 1
        except json.JSONDecodeError as err:
            print(f"error: {path} is not valid JSON: {err}", file=sys.stderr)
            return 1
        _summarize(payload, sys.stdout)
        return 0

    try:
        config = _load(args)
        if args.command == "sweep":
            config.kind = "sweep"
        config.validate()
    except (ConfigError, yaml.YAMLError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    if args.command == "validate":
        json.dump(config.echo(), sys.stdout, indent=1)
        print()
        return 0

    try:
        report = run_experiment(config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        if os.path.isdir(config.out) and os.listdir(config.out):
            print(f"warning: {config.out} may hold partial outputs from this run",
                  file=sys.stderr)
        return 1

    files = sorted(os.listdir(config.out))
    print(f"wrote {', '.join(files)} to {config.out} "
          f"({report.wall_clock_secs:.1f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
