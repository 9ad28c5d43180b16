"""Command-line entry point.

Each subcommand runs one experiment from an optional JSON config; the
``--seed``, ``--out``, and ``--threads`` flags override the corresponding
top-level config fields.  Every run writes one CSV plus a JSON manifest
(``<out>.manifest.json``) and exits nonzero iff any trial recorded an
error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import ExperimentConfig, run_experiment

SUBCOMMANDS = {
    "efficiency-curve": "efficiency_curve",
    "mc-validate": "mc_validate",
    "geometry": "geometry",
    "region-count": "region_count",
    "private-regression": "private_regression",
    "audit": "audit",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momest",
        description="Deterministic experiment runner for moment-based "
        "estimation from indirect supervision.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, experiment in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {experiment} experiment")
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="root RNG seed")
        p.add_argument("--out", type=str, default=None, help="output CSV path")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    if args.config:
        with open(args.config) as handle:
            data = json.load(handle)
    data["experiment"] = SUBCOMMANDS[args.command]
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if args.threads is not None:
        data["threads"] = args.threads
    if "seed" not in data:
        raise SystemExit("a seed is required (--seed or config field)")
    data.setdefault("out", args.command + ".csv")
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = config_from_args(args)
    code = run_experiment(config)
    print(f"wrote {config.out} ({'with errors' if code else 'ok'})")
    return code


if __name__ == "__main__":
    sys.exit(main())
