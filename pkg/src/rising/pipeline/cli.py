"""Command-line entry point: ``rising <subcommand> CONFIG [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import stages
from .config import MODES, SEED_KEYS, ExperimentConfig

BATCH_STAGES = {
    "generate-data": stages.generate_data,
    "simulate": stages.simulate,
    "build-targets": stages.build_targets,
    "build-ris": stages.build_ris,
    "run": stages.run_all,
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--k", type=int, dest="K", help="override the RIS iteration count")
    p.add_argument("--mode", choices=MODES, help="override the training target mode")
    p.add_argument("--output-dir", help="override the output directory")
    for key in SEED_KEYS:
        p.add_argument(f"--seed.{key}", type=int, dest=f"seed_{key}", metavar="N", help=f"override the {key} seed")
    p.add_argument("--force", action="store_true", help="rerun even if the outputs are up to date")


def _col_range(text: str) -> tuple[int, int]:
    try:
        start, stop = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP, got {text!r}") from None
    return start, stop


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rising", description="Sparse-view CT reconstruction experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate-data", "simulate", "build-targets", "build-ris", "train", "run"):
        _add_config_args(sub.add_parser(name))
    p = sub.add_parser("reconstruct")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sinogram", required=True)
    p.add_argument("--out", required=True, help="output image path (.imgraw)")
    p.add_argument("--compare-solver", action="store_true",
                   help="also time the solver from K to convergence")
    p = sub.add_parser("evaluate")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="defaults to the experiment's own checkpoint")
    p = sub.add_parser("profile")
    p.add_argument("images", nargs="+")
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--cols", type=_col_range, help="START:STOP, half-open")
    p.add_argument("--out", help="CSV path; stdout when omitted")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    seeds = {k: getattr(args, f"seed_{k}") for k in SEED_KEYS if getattr(args, f"seed_{k}") is not None}
    return cfg.with_overrides(K=args.K, mode=args.mode, seeds=seeds, output_dir=args.output_dir)


def dispatch(args) -> dict:
    if args.command == "profile":
        text = stages.profile(args.images, args.row, args.cols, args.out)
        if args.out is None:
            sys.stdout.write(text)
        return {"rows": text.count("\n") - 1}
    cfg = load_config(args)
    if args.command in BATCH_STAGES:
        BATCH_STAGES[args.command](cfg, force=args.force)
        return {"stage": args.command, "manifest": str(stages.manifest_path(cfg))}
    if args.command == "train":
        return {"checkpoint": str(stages.train_network(cfg, force=args.force))}
    if args.command == "reconstruct":
        _, timings = stages.reconstruct(cfg, args.checkpoint, args.sinogram, args.out, args.compare_solver)
        return {"image": args.out, "timings": timings}
    if args.command == "evaluate":
        report = stages.evaluate(cfg, args.checkpoint, force=args.force)
        print(report.format_table("gt"))
        return {"eval_dir": str(cfg.out / "eval" / stages.run_name(cfg))}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get("RISING_THREADS")
    try:
        with threadpool_limits(limits=stages.n_jobs() if threads else None):
            result = dispatch(args)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        err.update(getattr(exc, "details", {}))
        sys.stderr.write(json.dumps(err, default=str) + "\n")
        return 1
    if args.command != "profile" or args.out:
        print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
