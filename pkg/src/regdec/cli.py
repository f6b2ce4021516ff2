"""Command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config

COMMANDS = ("synth", "atlas", "train", "predict", "evaluate", "holdout")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regdec", description="Registration-based severity clustering on layered volumes.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="run configuration file")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--held-class", help="class left out by the holdout command")
    ap.add_argument("--input", nargs="+", help="volume header(s) for predict; default is the test split")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(args) -> str:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    if args.command == "synth":
        return str(pipeline.cmd_synth(cfg))
    if args.command == "atlas":
        return " ".join(str(p) for p in pipeline.cmd_atlas(cfg))
    if args.command == "train":
        return str(pipeline.cmd_train(cfg))
    if args.command == "predict":
        return str(pipeline.cmd_predict(cfg, args.input))
    if args.command == "evaluate":
        return str(pipeline.cmd_evaluate(cfg))
    if not args.held_class:
        raise pipeline.PipelineError("holdout needs --held-class")
    return str(pipeline.cmd_holdout(cfg, args.held_class))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        print(run(args))
    except Exception as e:  # one-line diagnostic, no traceback
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"regdec {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
