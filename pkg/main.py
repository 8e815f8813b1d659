#!/usr/bin/env python3
"""Enhanced-teacher student-teacher anomaly detection: synth-data, finetune, train, eval, infer, visualize."""

import argparse
import dataclasses
import logging
import os
import sys
import time

import torch

from backbone import build_backbone, replace_head
from checkpoint import head_classes, infer_backbone_config, load_checkpoint, read_checkpoint, save_checkpoint
from config import BackboneConfig, ScoringConfig, load_run_config
from dataset import build_finetune_dataset, index_mvtec, load_image, normal_train_dataset
from distill import train_student
from errors import EtStpmError, NumericError
from evalmetrics import evaluate
from finetune import run_finetune
from report import history_path, read_history, write_history, write_report
from scoring import score_batch
from synth import generate_synthetic
from visualize import load_map, render_overlay, save_map

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%H:%M:%S",
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _load_backbone(path: str, cfg: BackboneConfig):
    """Load a checkpoint into ``cfg``'s channel plan, taking the head width from the file."""
    return load_checkpoint(path, dataclasses.replace(cfg, num_classes=head_classes(path)))


def _maybe_history(checkpoint_path: str):
    path = history_path(checkpoint_path)
    return read_history(path) if os.path.exists(path) else None


def cmd_synth_data(args) -> int:
    cfg = load_run_config(args.config)
    logger.info("=== Stage: SYNTH-DATA ===")
    index = generate_synthetic(cfg.data.synth, args.out)
    logger.info(f"{len(index.records)} records in {len(index.categories)} categories under {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    logger.info("=== Stage: FINETUNE ===")
    index = index_mvtec(args.data)
    if args.init:
        teacher = _load_backbone(args.init, cfg.backbone)
        logger.info(f"Starting from imported weights {args.init}")
    else:
        teacher = build_backbone(cfg.backbone, cfg.seed)
    replace_head(teacher, len(index.categories), seed=cfg.finetune.seed)

    ds = build_finetune_dataset(index, cfg.backbone.input_size, cfg.finetune.abnormal_fraction)
    teacher, history = run_finetune(teacher, ds, cfg.finetune)
    save_checkpoint(teacher, args.out)
    write_history(history, history_path(args.out))
    if history:
        logger.info(f"Final training accuracy {history[-1].accuracy:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    logger.info("=== Stage: DISTILL ===")
    index = index_mvtec(args.data)
    teacher = _load_backbone(args.teacher, cfg.backbone)
    ds = normal_train_dataset(index, cfg.backbone.input_size)
    state = train_student(teacher, ds, cfg.distill)
    save_checkpoint(state.student, args.out)
    write_history(state.epochs, history_path(args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    logger.info("=== Stage: EVAL ===")
    started = time.perf_counter()
    index = index_mvtec(args.data)
    teacher = _load_backbone(args.teacher, cfg.backbone)
    student = _load_backbone(args.student, cfg.backbone)
    report = evaluate(teacher, student, index, cfg)

    histories = {}
    for stage, path in (("finetune", args.teacher), ("distill", args.student)):
        records = _maybe_history(path)
        if records is not None:
            histories[stage] = records
    write_report(report, args.report, cfg, histories, wall_clock_seconds=time.perf_counter() - started)

    print(f"\n{'=' * 50}")
    print("Anomaly Detection Report")
    print(f"{'=' * 50}")
    for row in report.per_category:
        image = "n/a" if row.image_auroc is None else f"{row.image_auroc:.3f}"
        pixel = "n/a" if row.pixel_auroc is None else f"{row.pixel_auroc:.3f}"
        print(f"{row.category:<20} image {image}  pixel {pixel}")
    mean_image = "n/a" if report.mean_image_auroc is None else f"{report.mean_image_auroc:.3f}"
    mean_pixel = "n/a" if report.mean_pixel_auroc is None else f"{report.mean_pixel_auroc:.3f}"
    print(f"{'Mean':<20} image {mean_image}  pixel {mean_pixel}")
    print(f"Report: {args.report}")
    print(f"{'=' * 50}")
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.config:
        run_cfg = load_run_config(args.config)
        cfg, scoring = run_cfg.backbone, run_cfg.scoring
    else:
        size = args.size or BackboneConfig().input_size
        cfg = infer_backbone_config(read_checkpoint(args.teacher), input_size=size)
        scoring = ScoringConfig()
    if args.size:
        cfg = dataclasses.replace(cfg, input_size=args.size)
    teacher = _load_backbone(args.teacher, cfg)
    student = _load_backbone(args.student, cfg)

    image = load_image(args.image, cfg.input_size).unsqueeze(0)
    fused, levels, scores = score_batch(teacher, student, image, scoring)
    save_map(fused.values[0].numpy(), args.map_out)
    if args.levels_out:
        for level in levels:
            save_map(level.values[0].numpy(), f"{args.levels_out}_{level.source}.npy")
    print(f"{scores[0].item():.8g}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    render_overlay(load_map(args.map), args.image, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="main.py", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="write the synthetic texture-defect dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("finetune", help="fine-tune the teacher on category classification")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from instead of a random init")
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("train", help="distill the teacher into a fresh student")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="image- and pixel-level AUROC per category")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", help="anomaly map for one image")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--map-out", required=True)
    p.add_argument("--levels-out", help="prefix for the three per-level maps")
    p.add_argument("--size", type=int, help="input size when no config is given")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("visualize", help="heatmap overlay PNG from a saved map")
    p.add_argument("--map", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_visualize)
    return parser


def cli_main(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    torch.use_deterministic_algorithms(True, warn_only=True)

    try:
        return args.handler(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except EtStpmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(cli_main(sys.argv[1:]))
