"""Command-line entry point: ``metaland train | eval | plot``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import config as config_mod
from .algorithms import NumericError
from .config import ConfigError
from .models import CheckpointError
from .plotting import PlotError, run_plot
from .runner import run_eval, run_train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaland", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train with per-epoch landscape metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--jobs", type=int, default=1, help="worker threads for evaluation")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")

    e = sub.add_parser("eval", help="evaluate a checkpoint with the per-epoch protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="config file (default: snapshot stored with the checkpoint)")
    e.add_argument("--jobs", type=int, default=1)

    pl = sub.add_parser("plot", help="render metrics as an SVG line chart")
    pl.add_argument("--metrics", nargs="+", required=True)
    pl.add_argument("--fields", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--dual", action="store_true", help="second field on a right-hand axis")
    pl.add_argument("--title")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "train":
            cfg = config_mod.load(args.config)
            if args.out:
                cfg = replace(cfg, output_dir=args.out)
            manifest = run_train(cfg, cfg.output_dir, jobs=args.jobs, resume=args.resume)
            print(manifest.path)
        elif args.command == "eval":
            cfg = config_mod.load(args.config) if args.config else None
            print(run_eval(args.checkpoint, cfg, jobs=args.jobs).to_json())
        else:
            print(run_plot(args.metrics, args.fields, args.out, dual=args.dual, title=args.title))
    except (ConfigError, CheckpointError, PlotError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
