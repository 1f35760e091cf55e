"""Command-line entry point: ``hemopinn <stage> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, load
from .pipeline import PipelineError, cmd_measure, cmd_postprocess, cmd_simulate, cmd_train, save_config, update_manifest

STAGES = ("simulate", "measure", "train", "postprocess", "report")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("hemopinn")


def _run(stage: str, cfg: RunConfig, out: Path, config_path: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(out, cfg, config_path)
    t0 = time.perf_counter()
    extra = None
    if stage == "simulate":
        cmd_simulate(cfg, out)
    elif stage == "measure":
        cmd_measure(cfg, out)
    elif stage == "train":
        results = cmd_train(cfg, out)
        extra = {"realizations": {str(r.realization): r.seed for r in results}}
    elif stage == "postprocess":
        cmd_postprocess(cfg, out)
    else:
        from .report import cmd_report
        cmd_report(cfg, out)
    update_manifest(out, cfg, stage, time.perf_counter() - t0, extra)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hemopinn", description="PINN Windkessel estimation on a 2D bifurcating channel.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--realizations", type=int, default=None, help="override training.realizations")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config, args.seed, args.realizations)
    except ConfigError as exc:
        print(f"hemopinn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _run(args.stage, cfg, args.out, args.config)
    except ConfigError as exc:
        print(f"hemopinn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"hemopinn: {args.stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
