"""Command-line entry point ``mfclab``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from ..model import SpecError
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import ExperimentError, run_experiment, write_outputs

COMMANDS = {
    "simulate": ("simulate", "lq"),
    "bsde": ("bsde", "lq"),
    "hjb": ("hjb", "lq"),
    "chaos": ("chaos", "tanh-drift"),
    "rate": ("value-rate", "lq"),
    "stability": ("stability", "lq-interact"),
    "crosscheck": ("cross-check", "lq"),
    "partialobs": ("partialobs", "partial-obs-lqg"),
}

DEFAULTS = {
    "simulate": dict(N_list=(200,), M=2000),
    "bsde": dict(N_inner=2000, M=10_000),
    "hjb": dict(),
    "chaos": dict(N_list=(8, 16, 32, 64, 128, 256, 512), M=200),
    "value-rate": dict(N_list=(2, 4, 8, 16, 32, 64), M=20_000, N_inner=512, seeds=(1, 2, 3, 4, 5)),
    "stability": dict(N_list=(8, 16, 32, 64, 128), M=2000, N_inner=1024, seeds=(0, 1, 2, 3, 4)),
    "cross-check": dict(N_inner=2000, M=10_000),
    "partialobs": dict(N_list=(8, 16, 32, 64, 128, 256), M=8000),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfclab", description="Mean-field control with common noise: experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--out", help="output directory for CSV, summary JSON and report")
    common.add_argument("--threads", type=int, default=1, help="worker threads over experiment cells")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (kind, preset) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=f"run the {kind} experiment (default preset {preset})")
    return p


def _config_for(command: str, path: str | None) -> ExperimentConfig:
    kind, preset = COMMANDS[command]
    if path is None:
        return ExperimentConfig(kind=kind, preset=preset, **DEFAULTS[kind])
    cfg = load_config(path)
    if cfg.kind != kind:
        cfg = replace(cfg, kind=kind)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_for(args.command, args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        result = run_experiment(cfg, max(args.threads, 1))
    except (ConfigError, SpecError, ExperimentError) as exc:
        print(f"mfclab: error: {exc}", file=sys.stderr)
        return 2
    out = args.out or cfg.out
    if out:
        write_outputs(cfg, result, out)
    sys.stdout.write(result.report())
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
