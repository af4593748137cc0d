"""Command-line front end.

Subcommands compose the pipeline: pretrain and tune stop behind their
stage, prune requires an existing stage-1 checkpoint, pipeline runs
everything through the report, and baselines/transfer/report build on a
finished run. Exit codes: 0 success, 2 config error, 3 data error, 4 stage
failure. XPROMPT_LOG sets the logging level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, DataError, ShapeError, StageError, StateError
from .harness import (BASELINE_ARMS, STAGES, RunConfig, collect_report,
                      run_baselines, run_pipeline, run_transfer)

log = logging.getLogger("xprompt.cli")


def _setup_logging() -> None:
    level_name = os.environ.get("XPROMPT_LOG", "").upper()
    level = getattr(logging, level_name, None) if level_name else logging.WARNING
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="run config file (defaults used if omitted)")
    sub.add_argument("--seed", type=int, help="override run.seeds with a single seed")
    sub.add_argument("--resume", action="store_true",
                     help="reuse completed stage checkpoints in the output directory")
    sub.add_argument("--jobs", type=int, default=1,
                     help="worker threads for per-seed stages")
    sub.add_argument("--out", help="override run.out output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xprompt",
        description="Soft-prompt tuning with hierarchical structured pruning "
                    "and rewinding on a frozen mini-transformer.")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
            ("pretrain", "build and checkpoint the frozen backbone"),
            ("tune", "stage-1 prompt tuning (builds the backbone if needed)"),
            ("prune", "hierarchical pruning + rewinding from stage-1 checkpoints"),
            ("pipeline", "full run: backbone, tune, prune, metrics report"),
            ("baselines", "ablation arms over the configured seeds"),
            ("transfer", "initialize the prompt from a source checkpoint"),
            ("report", "regenerate metrics.tsv and report.txt from checkpoints")):
        sub = commands.add_parser(name, help=help_text)
        _add_common(sub)
        if name == "pipeline":
            sub.add_argument("--stop-after", choices=STAGES,
                             help="halt after the named stage (for resume testing)")
        if name == "baselines":
            sub.add_argument("--which", default=",".join(BASELINE_ARMS),
                             help="comma list from: " + ", ".join(BASELINE_ARMS))
        if name == "transfer":
            sub.add_argument("--source", required=True,
                             help="prompt checkpoint directory to transfer from")
            sub.add_argument("--variants", default="transfer_o,transfer",
                             help="comma list from: transfer_o, transfer")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_mapping()
    if args.seed is not None:
        cfg = cfg.with_overrides(run__seeds=(args.seed,))
    if args.out:
        cfg = cfg.with_overrides(run__out=args.out)
    return cfg


def _dispatch(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    if args.command == "pretrain":
        run_pipeline(cfg, resume=args.resume, stop_after="backbone", jobs=args.jobs)
    elif args.command == "tune":
        run_pipeline(cfg, resume=args.resume, stop_after="stage1", jobs=args.jobs)
    elif args.command == "prune":
        out = cfg["run.out"]
        for seed in cfg["run.seeds"]:
            marker = os.path.join(out, f"seed{seed}", "stage1", "manifest.txt")
            if not os.path.exists(marker):
                raise DataError(f"stage-1 checkpoint missing for seed {seed}; "
                                f"run tune first: {marker}")
        run_pipeline(cfg, resume=True, stop_after="prune", jobs=args.jobs)
    elif args.command == "pipeline":
        run_pipeline(cfg, resume=args.resume, stop_after=args.stop_after,
                     jobs=args.jobs)
    elif args.command == "baselines":
        which = tuple(w.strip() for w in args.which.split(",") if w.strip())
        run_baselines(cfg, which=which, jobs=args.jobs)
    elif args.command == "transfer":
        variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
        run_transfer(cfg, args.source, variants=variants, jobs=args.jobs)
    elif args.command == "report":
        collect_report(cfg)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (StageError, StateError, ShapeError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
