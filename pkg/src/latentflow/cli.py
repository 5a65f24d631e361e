"""Command line entry point.

    latentflow run        --config cfg.yaml [--seed N] [--out DIR] [--smoke]
    latentflow train-vae | train-flow | invert | probe | transfer | isolate | report  (same flags)
    latentflow init-config {gaussians2d,factors}   # print a full default config

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .checkpoint import CheckpointError
from .config import DEFAULTS, EXPERIMENTS, load_config
from .errors import ConfigError, NumericError
from .experiments import STAGES, run_all, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p.add_argument("--smoke", action="store_true", help="tiny budgets for CI")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentflow", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="full pipeline"))
    for stage in STAGES:
        _add_common(sub.add_parser(stage, help=f"run the {stage} stage (reuses checkpoints)"))
    init = sub.add_parser("init-config", help="print the default config of an experiment")
    init.add_argument("experiment", choices=EXPERIMENTS)
    return parser


def format_summary(summary: dict) -> str:
    lines = [f"experiment {summary['experiment']}  seed {summary['seed']}"]

    def walk(prefix: str, obj) -> None:
        if isinstance(obj, dict):
            for k in sorted(obj):
                walk(f"{prefix}.{k}" if prefix else k, obj[k])
        elif isinstance(obj, list) and obj and isinstance(obj[0], (dict, list)):
            lines.append(f"  {prefix}: {json.dumps(obj)[:120]}")
        elif isinstance(obj, float):
            lines.append(f"  {prefix}: {obj:.6g}")
        else:
            lines.append(f"  {prefix}: {obj}")

    walk("", summary["metrics"])
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "init-config":
        sys.stdout.write(yaml.safe_dump(DEFAULTS[args.experiment], sort_keys=True))
        return EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, smoke=args.smoke)
        if args.command == "run":
            summary = run_all(cfg)
            print(format_summary(summary))
        else:
            result = run_stage(cfg, args.command)
            if args.command == "report":
                print(format_summary(result))
            else:
                print(json.dumps(result, sort_keys=True, indent=2))
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
