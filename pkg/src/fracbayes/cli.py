"""Command line entry point: ``fracbayes <pipeline> --config <file>``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import PIPELINES, StageError, load_config, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracbayes", description="Bayesian inversion of multi-term fractional diffusion models.")
    p.add_argument("pipeline", choices=PIPELINES)
    p.add_argument("--config", required=True, help="YAML or JSON experiment config")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for forward solves")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        files = run(cfg, args.pipeline, args.out, args.threads)
    except StageError as exc:
        print(f"fracbayes: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"fracbayes {args.pipeline}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
