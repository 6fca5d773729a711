"""Command line entry point: ``geoworld run | figure | validate``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import config as config_mod
from .errors import ConfigError
from .figures import FIGURES, emit_figure_data
from .runner import build_plan, run

EXIT_OK = 0
EXIT_FAILED_CELLS = 1
EXIT_CONFIG = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoworld", description="World models with geometric latent priors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every (variant, seed) cell of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds (default 1)")
    r.add_argument("--mode", choices=("worldmodel", "rl", "both"), default="worldmodel")
    r.add_argument("--jobs", type=int, default=None, help="parallel cells (default: CPU count)")
    r.add_argument("--out", default=None, help="output root (default: output_dir from the config)")

    f = sub.add_parser("figure", help="emit plot-ready CSV and an SVG for a finished cell")
    f.add_argument("--cell", required=True)
    f.add_argument("--kind", required=True, choices=FIGURES)

    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("--config", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "figure":
        try:
            paths = emit_figure_data(args.cell, args.kind)
        except (FileNotFoundError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILED_CELLS
        print(f"wrote {paths['csv']} and {paths['svg']}")
        return EXIT_OK

    try:
        cfg = config_mod.load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"{args.config}: ok ({len(cfg['variants'])} variant(s))")
        return EXIT_OK

    if args.seeds < 1:
        print("error: --seeds must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    plan = build_plan(cfg, args.seeds, args.mode, args.out)
    outcome = run(cfg, plan, args.jobs)
    print(f"{len(outcome['ok'])} cell(s) ok, {len(outcome['failed'])} failed; results in {plan.out_root}")
    for r in outcome["failed"]:
        print(f"  failed: {r['cell'].out_dir}: {r['error']}", file=sys.stderr)
    return EXIT_FAILED_CELLS if outcome["failed"] else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
