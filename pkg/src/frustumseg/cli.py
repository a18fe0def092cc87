"""Command-line entry point wiring the library into reproducible batch runs.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (failed gradient check, non-finite loss). All randomness funnels
through explicit seed flags; output files are written atomically.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import report
from .augment import MixSpec, frustum_mix, range_interpolate
from .errors import FrustumSegError, NumericError
from .geometry import build_range_image, default_palette, project, render_ppm
from .losses import LossWeights
from .metrics import (ConfusionMatrix, corruption_scores, iou_acc,
                      knn_postprocess, read_corruption_table)
from .model import FrustumRangeNet, ModelConfig, desk_grad_check, fit
from .nn import load_checkpoint, save_checkpoint
from .scan_io import (RunConfig, atomic_write_bytes, read_config, read_labels,
                      read_scan, synth_scene, write_labels, write_scan)

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _build_parser() -> _Parser:
    parser = _Parser(prog="frustumseg",
                     description="Frustum-range LiDAR segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("project", help="project a scan and dump pixel indices")
    p.add_argument("--scan", required=True)
    p.add_argument("--labels")
    p.add_argument("--config", required=True)
    p.add_argument("--out-ppm")
    p.add_argument("--out-index")

    p = sub.add_parser("augment", help="frustum-aware augmentations")
    aug = p.add_subparsers(dest="augment_command", required=True, parser_class=_Parser)
    mix = aug.add_parser("mix", help="swap frustum regions between two scans")
    mix.add_argument("--scan-a", required=True)
    mix.add_argument("--scan-b", required=True)
    mix.add_argument("--labels-a", required=True)
    mix.add_argument("--labels-b", required=True)
    mix.add_argument("--config", required=True)
    mix.add_argument("--seed", type=int, default=None,
                     help="defaults to the config's augment_seed")
    mix.add_argument("--mode", choices=["coin", "inclination", "azimuth"],
                     default="coin")
    mix.add_argument("--out", required=True,
                     help="output base path; writes <out>.bin and <out>.label")

    p = sub.add_parser("interpolate", help="synthesize points at empty pixels")
    p.add_argument("--scan", required=True)
    p.add_argument("--labels")
    p.add_argument("--config", required=True)
    p.add_argument("--direction", choices=["h", "v"])
    p.add_argument("--out", required=True,
                   help="output base path; writes <out>.bin (+ .label if labeled)")
    p.add_argument("--report", help="key = value report file")

    p = sub.add_parser("train-toy", help="overfit a synthetic scene")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--figures-dir")

    p = sub.add_parser("predict", help="label a scan with a trained model")
    p.add_argument("--scan", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-labels", required=True)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="key = value report file")
    p.add_argument("--figures-dir")

    p = sub.add_parser("eval-corruption", help="corruption error and resilience")
    p.add_argument("--table", required=True)
    p.add_argument("--out", help="key = value report file")
    p.add_argument("--figures-dir")

    p = sub.add_parser("knn", help="KNN post-processing of 2D predictions")
    p.add_argument("--pred-grid", required=True,
                   help="uint32 label words, H*W row-major")
    p.add_argument("--scan", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--cutoff", type=float, default=1.0)
    p.add_argument("--out-labels", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full graph")
    p.add_argument("--config", help="unused geometry is fine; kept for symmetry")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("render", help="render a labeled scan as a PPM image")
    p.add_argument("--scan", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_project(args, cfg: RunConfig) -> int:
    cloud = read_scan(args.scan, args.labels)
    index = project(cloud, cfg.sensor)
    if args.out_index:
        lines = "".join(f"{u} {v}\n" for u, v in zip(index.u, index.v))
        atomic_write_bytes(args.out_index, lines.encode("ascii"))
    if args.out_ppm:
        image = build_range_image(cloud, index, cfg.sensor)
        render_ppm(image, default_palette(cfg.sensor.num_classes), args.out_ppm,
                   ignore_label=cfg.sensor.ignore_label)
    print(f"projected {len(cloud)} points onto "
          f"{len(index.members)} occupied pixels")
    return 0


def _cmd_mix(args, cfg: RunConfig) -> int:
    a = read_scan(args.scan_a, args.labels_a)
    b = read_scan(args.scan_b, args.labels_b)
    seed = cfg.augment_seed if args.seed is None else args.seed
    spec = MixSpec(mode=args.mode, num_areas_choices=cfg.mix_num_areas,
                   rng_seed=seed)
    mixed = frustum_mix(a, b, cfg.sensor, spec)
    base = Path(args.out)
    write_scan(mixed, base.with_suffix(".bin"), base.with_suffix(".label"))
    print(f"mixed {len(a)} + {len(b)} -> {len(mixed)} points")
    return 0


def _cmd_interpolate(args, cfg: RunConfig) -> int:
    cloud = read_scan(args.scan, args.labels)
    direction = args.direction or cfg.interp_direction
    out_cloud, count = range_interpolate(cloud, cfg.sensor, direction)
    base = Path(args.out)
    write_scan(out_cloud, base.with_suffix(".bin"),
               base.with_suffix(".label") if out_cloud.labels is not None else None)
    print(f"interpolated {count} points")
    if args.report:
        report.write_text(args.report,
                          f"original = {len(cloud)}\n"
                          f"interpolated = {count}\n"
                          f"total = {len(out_cloud)}\n")
    return 0


def _cmd_train_toy(args, cfg: RunConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    epochs = cfg.epochs if args.epochs is None else args.epochs
    cloud = synth_scene(seed, args.points, cfg.sensor)
    model = FrustumRangeNet(ModelConfig.from_run_config(cfg), cfg.sensor, seed=seed)
    weights = LossWeights(lambda_frustum=cfg.lambda_frustum)

    def log(epoch: int, value: float) -> None:
        print(f"epoch {epoch + 1} loss {value:.6f}")

    losses = fit(model, cloud, epochs=epochs, lr=cfg.lr,
                 momentum=cfg.momentum, weights=weights, log=log)
    preds = model.predict(cloud)
    scores = iou_acc(ConfusionMatrix(cfg.sensor.num_classes,
                                     cfg.sensor.ignore_label)
                     .accumulate(preds, cloud.labels))
    print(f"final mIoU {100 * scores.miou:.2f}")
    save_checkpoint(model.parameters, args.checkpoint_out)
    report.write_text(args.metrics_out,
                      report.training_kv(losses, scores.miou, scores.macc))
    if args.figures_dir:
        figdir = Path(args.figures_dir)
        figdir.mkdir(parents=True, exist_ok=True)
        report.save_loss_chart(losses, figdir / "training_loss.png")
        report.save_iou_chart(scores, figdir / "training_iou.png")
    return 0


def _cmd_predict(args, cfg: RunConfig) -> int:
    cloud = read_scan(args.scan)
    model = FrustumRangeNet(ModelConfig.from_run_config(cfg), cfg.sensor, seed=cfg.seed)
    model.load_state(load_checkpoint(args.checkpoint))
    model.freeze()
    preds = model.predict(cloud)
    write_labels(preds, args.out_labels)
    print(f"predicted {preds.shape[0]} labels")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    pred = read_labels(args.pred)
    gt = read_labels(args.gt)
    cm = ConfusionMatrix(cfg.sensor.num_classes, cfg.sensor.ignore_label)
    scores = iou_acc(cm.accumulate(pred, gt))
    print(report.metric_table(scores))
    if args.out:
        report.write_text(args.out, report.metric_kv(scores))
    if args.figures_dir:
        figdir = Path(args.figures_dir)
        figdir.mkdir(parents=True, exist_ok=True)
        report.save_iou_chart(scores, figdir / "eval_iou.png")
    return 0


def _cmd_eval_corruption(args) -> int:
    table = read_corruption_table(args.table)
    scores = corruption_scores(table)
    print(report.corruption_table(scores))
    if args.out:
        report.write_text(args.out, report.corruption_kv(scores))
    if args.figures_dir:
        figdir = Path(args.figures_dir)
        figdir.mkdir(parents=True, exist_ok=True)
        report.save_corruption_chart(scores, figdir / "corruption.png")
    return 0


def _cmd_knn(args, cfg: RunConfig) -> int:
    sensor = cfg.sensor
    grid = read_labels(args.pred_grid)
    if grid.size != sensor.height * sensor.width:
        raise FrustumSegError(
            f"prediction grid has {grid.size} entries, expected "
            f"{sensor.height * sensor.width}")
    grid = grid.reshape(sensor.height, sensor.width)
    cloud = read_scan(args.scan)
    index = project(cloud, sensor)
    labels = knn_postprocess(grid, cloud, index, k=args.k,
                             window=args.window, range_cutoff=args.cutoff)
    write_labels(labels, args.out_labels)
    print(f"smoothed {labels.shape[0]} labels (k={args.k}, window={args.window})")
    return 0


def _cmd_gradcheck(args) -> int:
    kwargs = {} if args.seed is None else {"seed": args.seed}
    rep = desk_grad_check(**kwargs)
    print(f"max rel err {rep.max_rel_err:.3e} (tolerance {rep.tolerance:.0e})")
    if rep.skipped:
        print(f"skipped frozen: {', '.join(rep.skipped)}")
    if not rep.passed:
        print("FAIL")
        return NUMERIC_EXIT
    print("PASS")
    return 0


def _cmd_render(args, cfg: RunConfig) -> int:
    cloud = read_scan(args.scan, args.labels)
    image = build_range_image(cloud, project(cloud, cfg.sensor), cfg.sensor)
    render_ppm(image, default_palette(cfg.sensor.num_classes), args.out,
               ignore_label=cfg.sensor.ignore_label)
    print(f"rendered {cfg.sensor.height}x{cfg.sensor.width} image")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "eval-corruption":
            return _cmd_eval_corruption(args)
        cfg = read_config(args.config)
        if args.command == "project":
            return _cmd_project(args, cfg)
        if args.command == "augment":
            return _cmd_mix(args, cfg)
        if args.command == "interpolate":
            return _cmd_interpolate(args, cfg)
        if args.command == "train-toy":
            return _cmd_train_toy(args, cfg)
        if args.command == "predict":
            return _cmd_predict(args, cfg)
        if args.command == "eval":
            return _cmd_eval(args, cfg)
        if args.command == "knn":
            return _cmd_knn(args, cfg)
        if args.command == "render":
            return _cmd_render(args, cfg)
        parser.error(f"unknown command {args.command}")
        return USAGE_EXIT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except (FrustumSegError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
