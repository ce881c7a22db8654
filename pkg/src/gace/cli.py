"""Command-line surface: synth, label, train, rescore, eval, oracle, bench
and ablate-report subcommands.

Every run logs its fully resolved configuration (all defaults
materialized) before acting. All randomness flows through explicit --seed
flags; GACE_NUM_THREADS sizes worker pools and affects speed only, never
results. Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evaluation, io, synth
from .errors import DataFormatError, GaceError
from .features import NormConfig
from .net import build_model
from .supervision import assign_labels, default_thresholds
from .trainer import (Rescorer, TrainConfig, build_training_set, env_threads,
                      train)

logger = logging.getLogger("gace")

STAGE_LABELS = (
    ("points_in_box", "Points in Boxes Query", "Feature Extraction"),
    ("features", "Geometric & Statistical Features", "Feature Extraction"),
    ("neighbor_query", "Neighboring Object ID's Query", "Feature Extraction"),
    ("h_i", "H_I (Instance-specific)", "Network Inference"),
    ("h_c", "H_C (Contextual)", "Network Inference"),
    ("h_f", "H_F (Confidence Estimation)", "Network Inference"),
)


def _log_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    logger.info("resolved configuration: %s",
                json.dumps(resolved, sort_keys=True, default=str))


def _scene_config(args) -> synth.SceneConfig:
    if args.preset == "bench":
        cfg = synth.throughput_config(seed=args.seed, n_frames=args.frames)
    else:
        cfg = synth.SceneConfig(seed=args.seed, n_frames=args.frames)
    overrides = {}
    if args.fov_radius is not None:
        overrides["fov_radius"] = args.fov_radius
    if args.channels is not None:
        overrides["channels"] = args.channels
    if args.occlusion_rate is not None:
        overrides["occlusion_rate"] = args.occlusion_rate
    return replace(cfg, **overrides) if overrides else cfg


def cmd_synth(args) -> int:
    scene = _scene_config(args)
    model = {"a": synth.error_model_a, "b": synth.error_model_b,
             "none": lambda: None}[args.error_model]()
    det_seed = args.det_seed if args.det_seed is not None else args.seed + 1
    digest_src = {"scene": asdict(scene),
                  "error_model": None if model is None else asdict(model),
                  "det_seed": det_seed}
    digest = hashlib.sha256(json.dumps(digest_src, sort_keys=True,
                                       default=str).encode()).hexdigest()
    frames = synth.generate_frames(scene, model, det_seed)
    io.write_dataset(args.out, frames, synth.CLASS_NAMES,
                     channels=scene.channels, seed_digest=digest)
    logger.info("wrote %d frames to %s", scene.n_frames, args.out)
    return 0


def cmd_label(args) -> int:
    manifest, frames = io.read_dataset(args.data, load_points=False)
    thresholds = _resolve_thresholds(args.thresholds, len(manifest.classes))
    for frame in frames:
        if frame.ground_truth is None:
            raise GaceError(f"frame {frame.frame_id!r} has no ground truth")
        labeled = assign_labels(frame.detections, frame.ground_truth,
                                thresholds)
        io.write_labels(args.out or args.data, frame.frame_id, labeled)
    logger.info("labeled %d frames", len(frames))
    return 0


def _resolve_thresholds(raw, class_count: int) -> tuple:
    if raw is None:
        return default_thresholds(class_count)
    if len(raw) == 1:
        return tuple(raw) * class_count
    if len(raw) != class_count:
        raise GaceError(f"need {class_count} per-class thresholds, "
                        f"got {len(raw)}")
    return tuple(raw)


def cmd_train(args) -> int:
    manifest = io.read_manifest(args.train)
    use_elongation = not args.no_elongation and manifest.channels >= 5
    norm = NormConfig(radius=args.radius, class_count=len(manifest.classes),
                      use_elongation=use_elongation)
    thresholds = _resolve_thresholds(args.thresholds, len(manifest.classes))

    store = None
    cache = Path(args.cache) if args.cache else None
    if cache is not None and cache.exists():
        cached = io.load_store(cache)
        if (cached.norm_config.digest() == norm.digest()
                and cached.thresholds == thresholds):
            store = cached
            logger.info("reusing feature cache %s", cache)
        else:
            logger.info("feature cache %s does not match the requested "
                        "configuration; rebuilding", cache)
    if store is None:
        store = build_training_set(io.iter_frames(args.train),
                                   thresholds=thresholds, norm_config=norm)
        if cache is not None:
            io.save_store(store, cache)
            logger.info("saved feature cache to %s", cache)

    cfg = TrainConfig(seed=args.seed, epochs=args.epochs, lr=args.lr,
                      lambda_iou=args.lambda_iou, radius=args.radius,
                      batch_frames=args.batch, ablate=tuple(args.ablate),
                      use_instance=not args.no_instance,
                      use_context=not args.no_context,
                      detach_context=args.detach_context,
                      hidden=args.hidden, f_i_dim=args.f_i_dim,
                      f_c_dim=args.f_c_dim)
    log_path = Path(args.out_model).with_suffix(
        Path(args.out_model).suffix + ".log")
    with open(log_path, "w") as log_file:
        def log_fn(stats):
            log_file.write(stats.log_line() + "\n")
            logger.info("epoch %d: total=%.6f focal=%.6f iou_l1=%.6f "
                        "(%.1fs)", stats.epoch, stats.mean_total_loss,
                        stats.mean_focal, stats.mean_iou_l1,
                        stats.wall_seconds)
        model, _ = train(store, cfg, log_fn=log_fn)
    io.save_model(model, args.out_model)
    logger.info("saved model to %s (training log: %s)", args.out_model,
                log_path)
    return 0


def cmd_rescore(args) -> int:
    model = io.load_model(args.model)
    manifest = io.read_manifest(args.frames)
    rescorer = Rescorer(model)
    out_frames = []
    for frame in io.iter_frames(args.frames):
        scores = rescorer.rescore(frame)
        dets = [type(d)(d.box, d.class_id, float(s))
                for d, s in zip(frame.detections, scores)]
        out_frames.append(type(frame)(frame.frame_id, frame.points, dets,
                                      frame.ground_truth))
    io.write_dataset(args.out, out_frames, manifest.classes,
                     channels=manifest.channels,
                     seed_digest=manifest.seed_digest,
                     write_points=not args.no_points)
    logger.info("rescored %d frames into %s", len(out_frames), args.out)
    return 0


def _load_eval_inputs(pred_root, gt_root):
    pred_manifest, pred_frames = io.read_dataset(pred_root, load_points=False)
    _, gt_frames = io.read_dataset(gt_root, load_points=False)
    dets = {f.frame_id: f.detections for f in pred_frames}
    gts = {f.frame_id: (f.ground_truth or []) for f in gt_frames}
    missing = set(dets) - set(gts)
    if missing:
        raise GaceError(f"{len(missing)} prediction frames have no ground "
                        f"truth counterpart, e.g. {sorted(missing)[:3]}")
    return pred_manifest, dets, gts


def cmd_eval(args) -> int:
    manifest, dets, gts = _load_eval_inputs(args.pred, args.gt)
    thresholds = _resolve_thresholds(args.iou_thr, len(manifest.classes))
    if args.min_points is not None or args.max_points is not None:
        _, frames = io.read_dataset(args.gt, load_points=True)
        pred_by_id = dict(dets)
        merged = [type(f)(f.frame_id, f.points,
                          pred_by_id.get(f.frame_id, []), f.ground_truth)
                  for f in frames]
        dets, gts = evaluation.filter_by_point_count(
            merged, args.min_points, args.max_points, thresholds,
            class_count=len(manifest.classes))
    report = evaluation.evaluate(dets, gts, manifest.classes, thresholds)
    table = report.format_table()
    print(table)
    headline = report.map_r40 if args.r40 else report.map
    logger.info("headline %s = %.2f", "mAP@R40" if args.r40 else "mAP",
                100 * headline)
    if args.report:
        Path(args.report).write_text(table + "\n")
        json_path = Path(args.report).with_suffix(".json")
        json_path.write_text(json.dumps(report.to_dict(), sort_keys=True,
                                        indent=2) + "\n")
        logger.info("wrote %s and %s", args.report, json_path)
    if args.curves_out:
        out = Path(args.curves_out)
        out.mkdir(parents=True, exist_ok=True)
        for cls in report.classes:
            rows = evaluation.curve_csv_rows(cls.curve)
            (out / f"curve_{cls.name}.csv").write_text("\n".join(rows) + "\n")
        logger.info("wrote PR curves to %s", out)
    if args.condition:
        _, frames = io.read_dataset(args.gt, load_points=True)
        pred_by_id = dict(dets)
        merged = [type(f)(f.frame_id, f.points,
                          pred_by_id.get(f.frame_id, []), f.ground_truth)
                  for f in frames]
        cond = evaluation.conditional_precision(
            merged, args.condition, args.condition_bins,
            iou_thresholds=thresholds, score_threshold=args.condition_threshold,
            class_count=len(manifest.classes))
        path = args.condition_out or f"conditional_{args.condition}.csv"
        Path(path).write_text("\n".join(cond.csv_rows()) + "\n")
        logger.info("wrote conditional precision to %s", path)
    if args.plot:
        _plot_curves(report, args.plot)
        logger.info("wrote %s", args.plot)
    return 0


def _plot_curves(report, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for cls in report.classes:
        if not cls.curve:
            continue
        ax.plot([p.recall for p in cls.curve],
                [p.precision for p in cls.curve],
                label=f"{cls.name} (AP {100 * cls.ap:.1f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_oracle(args) -> int:
    manifest, dets, gts = _load_eval_inputs(args.pred, args.gt)
    thresholds = _resolve_thresholds(args.iou_thr, len(manifest.classes))
    print(f"{'class':<12} {'AP':>8} {'oracleAP':>9} {'gap':>8}")
    for cid, name in enumerate(manifest.classes):
        base, oracle = evaluation.oracle_gap(dets, gts, cid, thresholds[cid])
        print(f"{name:<12} {100 * base:>8.2f} {100 * oracle:>9.2f} "
              f"{100 * (oracle - base):>8.2f}")
    return 0


def _bench_frames(args):
    if args.frames:
        return list(io.iter_frames(args.frames))
    scene = synth.throughput_config(seed=args.seed, n_frames=args.n_frames)
    return list(synth.generate_frames(scene, synth.error_model_a(),
                                      args.seed + 1))


def cmd_bench(args) -> int:
    frames = _bench_frames(args)
    if args.model:
        model = io.load_model(args.model)
    else:
        channels = frames[0].points.shape[1] if frames else 5
        norm = NormConfig(class_count=len(synth.CLASS_NAMES),
                          use_elongation=channels >= 5)
        model = build_model(norm, seed=args.seed)
    rescorer = Rescorer(model)
    n_dets = [len(f.detections) for f in frames]
    n_pts = [f.points.shape[0] for f in frames]
    logger.info("bench input: %d frames, %.0f detections and %.0f points "
                "per frame on average", len(frames),
                float(np.mean(n_dets)), float(np.mean(n_pts)))

    rescorer.rescore(frames[0])  # warm up JIT kernels outside the clock
    per_stage = {key: [] for key, _, _ in STAGE_LABELS}
    per_frame = []
    for _ in range(args.repeat):
        for frame in frames:
            timings = {}
            t0 = time.perf_counter()
            rescorer.rescore(frame, timings=timings)
            per_frame.append(time.perf_counter() - t0)
            for key, _, _ in STAGE_LABELS:
                per_stage[key].append(timings.get(key, 0.0))

    # Sustained pipeline throughput with the worker pool (results are
    # identical to the sequential path; the pool affects speed only).
    pool = env_threads(default=min(4, args.pool))
    t0 = time.perf_counter()
    for _ in range(args.repeat):
        rescorer.rescore_many(frames, n_threads=pool)
    wall = time.perf_counter() - t0
    fps = args.repeat * len(frames) / wall

    rows = [f"{'group':<20} {'stage':<34} {'mean ms':>9} {'p95 ms':>9}"]
    rows.append("-" * len(rows[0]))
    for key, label, group in STAGE_LABELS:
        arr = np.array(per_stage[key]) * 1e3
        rows.append(f"{group:<20} {label:<34} {arr.mean():>9.3f} "
                    f"{np.percentile(arr, 95):>9.3f}")
    overall = np.array(per_frame) * 1e3
    rows.append("-" * len(rows[0]))
    rows.append(f"{'Overall':<20} {'(per frame, single stream)':<34} "
                f"{overall.mean():>9.3f} {np.percentile(overall, 95):>9.3f}")
    rows.append(f"{'Overall':<20} {'sustained throughput':<34} "
                f"{fps:>9.1f} frames/s (pool={pool})")
    table = "\n".join(rows)
    print(table)
    if args.csv:
        Path(args.csv).write_text(table + "\n")
    return 0


def cmd_ablate_report(args) -> int:
    manifest = io.read_manifest(args.train_data)
    norm = NormConfig(radius=args.radius, class_count=len(manifest.classes),
                      use_elongation=manifest.channels >= 5)
    thresholds = _resolve_thresholds(None, len(manifest.classes))
    store = build_training_set(io.iter_frames(args.train_data),
                               thresholds=thresholds, norm_config=norm)
    _, eval_frames = io.read_dataset(args.eval_data, load_points=True)
    gts = {f.frame_id: (f.ground_truth or []) for f in eval_frames}
    base_dets = {f.frame_id: f.detections for f in eval_frames}

    if args.grid == "components":
        variants = [
            ("instance only", dict(use_context=False, lambda_iou=0.0)),
            ("contextual only", dict(use_instance=False, lambda_iou=0.0)),
            ("instance+contextual", dict(lambda_iou=0.0)),
            ("instance only +iou", dict(use_context=False)),
            ("contextual only +iou", dict(use_instance=False)),
            ("instance+contextual +iou", dict()),
        ]
    else:
        variants = [(f"{g} only", dict(ablate=tuple(o for o in
                                                    ("box", "count", "angle",
                                                     "stats") if o != g)))
                    for g in ("box", "count", "angle", "stats")]

    rows = [f"{'variant':<28} {'mAP':>8} {'mAPH':>8} {'dAP':>8}"]
    rows.append("-" * len(rows[0]))
    base_report = evaluation.evaluate(base_dets, gts, manifest.classes,
                                      thresholds)
    rows.append(f"{'baseline (detector)':<28} {100 * base_report.map:>8.2f} "
                f"{100 * base_report.maph:>8.2f} {0.0:>8.2f}")
    for name, overrides in variants:
        cfg = TrainConfig(seed=args.seed, epochs=args.epochs,
                          radius=args.radius, **overrides)
        model, _ = train(store, cfg)
        rescorer = Rescorer(model)
        dets = {}
        for frame in eval_frames:
            scores = rescorer.rescore(frame)
            dets[frame.frame_id] = [type(d)(d.box, d.class_id, float(s))
                                    for d, s in zip(frame.detections, scores)]
        report = evaluation.evaluate(dets, gts, manifest.classes, thresholds)
        rows.append(f"{name:<28} {100 * report.map:>8.2f} "
                    f"{100 * report.maph:>8.2f} "
                    f"{100 * (report.map - base_report.map):>8.2f}")
        logger.info("variant %r: mAP %.2f", name, 100 * report.map)
    table = "\n".join(rows)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gace",
        description="Geometry-aware confidence rescoring for black-box "
                    "LiDAR 3D detector outputs.",
        epilog="GACE_NUM_THREADS sizes worker pools (speed only, results "
               "are identical at any setting).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", required=True, type=int,
                   help="scene seed (required; no time-based default)")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--error-model", choices=("a", "b", "none"), default="a")
    p.add_argument("--det-seed", type=int, default=None,
                   help="detector simulation seed (default: --seed + 1)")
    p.add_argument("--preset", choices=("default", "bench"), default="default")
    p.add_argument("--fov-radius", type=float, default=None)
    p.add_argument("--channels", type=int, choices=(4, 5), default=None)
    p.add_argument("--occlusion-rate", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="attach TP/FP labels and IoU targets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None,
                   help="output dataset root (default: in place)")
    p.add_argument("--thresholds", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a rescoring model")
    p.add_argument("--train", required=True, help="training dataset root")
    p.add_argument("--out-model", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--lambda-iou", type=float, default=0.5)
    p.add_argument("--radius", type=float, default=40.0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--ablate", nargs="*", default=(),
                   choices=("box", "count", "angle", "stats"),
                   help="instance feature groups to zero out")
    p.add_argument("--no-elongation", action="store_true")
    p.add_argument("--no-instance", action="store_true")
    p.add_argument("--no-context", action="store_true")
    p.add_argument("--detach-context", action="store_true")
    p.add_argument("--thresholds", type=float, nargs="+", default=None)
    p.add_argument("--cache", default=None, help="feature cache path")
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--f-i-dim", type=int, default=128)
    p.add_argument("--f-c-dim", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rescore", help="rescore a dataset with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True, help="input dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--no-points", action="store_true",
                   help="do not copy point payloads into the output")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-thr", type=float, nargs="+", default=None)
    p.add_argument("--r40", action="store_true",
                   help="headline the 40-recall-point AP")
    p.add_argument("--report", default=None,
                   help="write the table here and JSON alongside")
    p.add_argument("--curves-out", default=None)
    p.add_argument("--min-points", type=int, default=None)
    p.add_argument("--max-points", type=int, default=None)
    p.add_argument("--condition",
                   choices=tuple(evaluation.CONDITIONERS), default=None)
    p.add_argument("--condition-bins", type=int, default=12)
    p.add_argument("--condition-threshold", type=float, default=0.3)
    p.add_argument("--condition-out", default=None)
    p.add_argument("--plot", default=None, help="write PR curves as SVG/PDF")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="baseline vs oracle AP per class")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-thr", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="per-stage runtime breakdown")
    p.add_argument("--frames", default=None,
                   help="dataset root (default: generated dense frames)")
    p.add_argument("--model", default=None)
    p.add_argument("--seed", type=int, default=61009)
    p.add_argument("--n-frames", type=int, default=30)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--pool", type=int, default=4,
                   help="worker pool cap for the throughput figure")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-report",
                       help="component or feature-group ablation grid")
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--radius", type=float, default=40.0)
    p.add_argument("--grid", choices=("components", "feature-groups"),
                   default="components")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    _log_config(args)
    try:
        return args.func(args)
    except (GaceError, DataFormatError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
