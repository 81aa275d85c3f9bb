"""`malab` command-line interface.

    malab <subcommand> --config <path> [--seed U64] [--out DIR]
          [--mode cond|cfg|dg|cfg+dg] [--lambda F] [--w F] [--m INT]

Exit codes: 0 success, 2 configuration error, 3 numeric error (NaN/Inf),
4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

from ..numerics import NonFiniteError
from .config import ConfigError, load_config
from . import experiments

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="malab",
        description="Toy diffusion-transformer workbench: train, trace, "
                    "disrupt, and guide.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out_dir")
        p.add_argument("--mode", choices=["cond", "cfg", "dg", "cfg+dg"],
                       help="override guidance.mode")
        p.add_argument("--lambda", dest="lam", type=float,
                       help="override guidance.lambda")
        p.add_argument("--w", type=float, help="override guidance.w")
        p.add_argument("--m", type=int, help="override guidance.m")

    common(sub.add_parser("train", help="train the toy model"))
    p = sub.add_parser("sample", help="draw samples under a guidance mode")
    common(p)
    p.add_argument("--grid", action="store_true",
                   help="also write a PPM grid of token-field magnitudes")
    common(sub.add_parser("analyze",
                          help="layer/alpha/timestep/condition profiles"))
    common(sub.add_parser("intervene", help="three-arm masking comparison"))
    p = sub.add_parser("sweep", help="metric grids over m, lambda, or w")
    common(p)
    p.add_argument("--param", required=True, choices=["m", "lambda", "w"])
    p.add_argument("--values", required=True,
                   help="comma list (0.5,1,2) or integer range (1..6)")
    common(sub.add_parser("report",
                          help="markdown summary plus figures from all CSVs"))
    return parser


def _parse_values(text: str, param: str) -> list:
    text = text.strip()
    if ".." in text:
        lo, _, hi = text.partition("..")
        return list(range(int(lo), int(hi) + 1))
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"--values {text!r} holds no values")
    if param == "m":
        return [int(v) for v in values]
    return [float(v) for v in values]


def _apply_overrides(config, args) -> None:
    if args.seed is not None:
        config.run.seed = args.seed
    if args.out is not None:
        config.run.out_dir = args.out
    if args.mode is not None:
        config.guidance.mode = args.mode
    if args.lam is not None:
        if args.lam < 0:
            raise ConfigError("--lambda must be nonnegative")
        config.guidance.lam = args.lam
    if args.w is not None:
        if args.w < 0:
            raise ConfigError("--w must be nonnegative")
        config.guidance.w = args.w
    if args.m is not None:
        if not 1 <= args.m <= config.model.blocks:
            raise ConfigError(
                f"--m {args.m} outside [1, {config.model.blocks}]")
        config.guidance.m = args.m


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"malab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            experiments.run_train(config)
        elif args.command == "sample":
            experiments.run_sample(config, grid=args.grid)
        elif args.command == "analyze":
            experiments.run_analyze(config)
        elif args.command == "intervene":
            experiments.run_intervene(config)
        elif args.command == "sweep":
            values = _parse_values(args.values, args.param)
            experiments.run_sweep(config, args.param, values)
        elif args.command == "report":
            experiments.run_report(config)
    except (ConfigError, ValueError) as exc:
        print(f"malab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"malab: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"malab: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
