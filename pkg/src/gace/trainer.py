"""Dataset construction from detector outputs, the training loop, rescoring."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GaceError
from .features import (NormConfig, ablation_mask, instance_matrix,
                       neighbor_pairs)
from .geometry import PointGrid, boxes_to_array
from .net import (AdamState, FrameInputs, GaceModel, LossConfig, adam_step,
                  backward, build_model, gace_forward, grad_list,
                  model_params)
from .supervision import assign_labels, default_thresholds
from .validation import check_frame

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "GACE_NUM_THREADS"


def env_threads(default: int = 1) -> int:
    """Worker-pool size from GACE_NUM_THREADS. Affects speed only."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring invalid %s=%r", THREADS_ENV_VAR, raw)
        return default


def _map_frames(fn, items, n_threads):
    if n_threads <= 1:
        return [fn(it) for it in items]
    # Results are collected in input order, so the pool size never changes
    # the output.
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class Frame:
    """One LiDAR sweep: points plus its detections and ground truth.

    ``points`` is an (N, C) array with channels x, y, z, intensity and
    optionally elongation. Ground truth may be absent at inference time.
    """

    frame_id: str
    points: np.ndarray
    detections: list
    ground_truth: list | None = None


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe. The defaults are the standard recipe: 5 epochs,
    Adam at lr 0.001, IoU-guidance weight 0.5, 40 m context radius,
    8-frame batches."""

    seed: int
    epochs: int = 5
    lr: float = 0.001
    lambda_iou: float = 0.5
    radius: float = 40.0
    batch_frames: int = 8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    hidden: int = 256
    f_i_dim: int = 128
    f_c_dim: int = 64
    fusion_hidden: int = 256
    ablate: tuple = ()
    use_instance: bool = True
    use_context: bool = True
    detach_context: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_frames < 1:
            raise ValueError("epochs and batch_frames must be >= 1")
        for g in self.ablate:
            if g not in ("box", "count", "angle", "stats"):
                raise ValueError(f"unknown ablation group {g!r}")

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_iou=self.lambda_iou, gamma=self.focal_gamma,
                          alpha=self.focal_alpha)


def prepare_frame_inputs(frame: Frame, cfg: NormConfig,
                         timings: dict | None = None) -> FrameInputs:
    """Extract all network inputs for one frame.

    Optional ``timings`` accumulates wall seconds per stage under the keys
    points_in_box, features and neighbor_query.
    """
    check_frame(frame, min_channels=cfg.required_channels,
                class_count=cfg.class_count)
    boxes = boxes_to_array([d.box for d in frame.detections])
    classes = np.array([d.class_id for d in frame.detections], dtype=np.int64)
    scores = np.array([d.score for d in frame.detections], dtype=np.float64)

    t0 = time.perf_counter() if timings is not None else 0.0
    grid = PointGrid(frame.points)
    idx, off = grid.query_boxes(boxes)
    if timings is not None:
        t1 = time.perf_counter()
        timings["points_in_box"] = timings.get("points_in_box", 0.0) + t1 - t0
        t0 = t1

    stats, counts = grid.box_stats(boxes, cfg.stats_channel_indices, idx, off)
    x = instance_matrix(boxes, scores, classes, stats, counts, cfg)
    if timings is not None:
        t1 = time.perf_counter()
        timings["features"] = timings.get("features", 0.0) + t1 - t0
        t0 = t1

    subject, neighbor, offsets, geo = neighbor_pairs(boxes, classes, cfg)
    if timings is not None:
        timings["neighbor_query"] = (timings.get("neighbor_query", 0.0)
                                     + time.perf_counter() - t0)
    return FrameInputs(x, subject, neighbor, offsets, geo)


@dataclass
class FrameRecord:
    """Cached training inputs and targets for one frame."""

    frame_id: str
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    pair_subject: np.ndarray
    pair_neighbor: np.ndarray
    pair_offsets: np.ndarray
    pair_geo: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def inputs(self) -> FrameInputs:
        return FrameInputs(self.x, self.pair_subject, self.pair_neighbor,
                           self.pair_offsets, self.pair_geo)


@dataclass
class TrainingStore:
    """Labeled, feature-extracted frames, decoupled from the base detector."""

    norm_config: NormConfig
    thresholds: tuple
    records: list

    @property
    def n_samples(self) -> int:
        return sum(r.n for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


def _build_record(frame: Frame, thresholds, cfg: NormConfig) -> FrameRecord:
    if frame.ground_truth is None:
        raise GaceError(f"frame {frame.frame_id!r} has no ground truth; "
                        "training data needs labeled frames")
    labeled = assign_labels(frame.detections, frame.ground_truth, thresholds)
    inputs = prepare_frame_inputs(frame, cfg)
    u = np.array([l.u for l in labeled], dtype=np.int8)
    v = np.array([l.v for l in labeled], dtype=np.float64)
    return FrameRecord(frame.frame_id, inputs.x, u, v, inputs.pair_subject,
                       inputs.pair_neighbor, inputs.pair_offsets,
                       inputs.pair_geo)


def build_training_set(frames, thresholds=None,
                       norm_config: NormConfig | None = None,
                       n_threads: int | None = None) -> TrainingStore:
    """Label and feature-extract a stream of frames into a training store.

    Only the detector's outputs are read (black-box contract). Frames
    without ground truth are rejected with their id in the error.
    """
    cfg = norm_config if norm_config is not None else NormConfig()
    if thresholds is None:
        thresholds = default_thresholds(cfg.class_count)
    thresholds = tuple(float(t) for t in thresholds)
    if len(thresholds) < cfg.class_count:
        raise GaceError(f"need {cfg.class_count} class thresholds, "
                        f"got {len(thresholds)}")
    if n_threads is None:
        n_threads = env_threads()
    records = _map_frames(lambda f: _build_record(f, thresholds, cfg),
                          frames, n_threads)
    return TrainingStore(cfg, thresholds, list(records))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_total_loss: float
    mean_focal: float
    mean_iou_l1: float
    wall_seconds: float

    def log_line(self) -> str:
        return (f"{self.epoch}\t{self.mean_total_loss:.6f}"
                f"\t{self.mean_focal:.6f}\t{self.mean_iou_l1:.6f}"
                f"\t{self.wall_seconds:.3f}")


def train(store: TrainingStore, cfg: TrainConfig, log_fn=None):
    """Train a model on a labeled store.

    Frames are shuffled per epoch by a seeded permutation; per step the
    gradient is averaged over the batch's detections. Frames are always
    reduced in permutation order, so training is reproducible regardless
    of thread settings. A non-finite loss aborts with a diagnostic.

    Returns (model, history) where history is a list of EpochStats.
    """
    if store.n_samples == 0:
        raise GaceError("training store contains no detections")
    norm = store.norm_config
    if abs(norm.radius - cfg.radius) > 1e-9:
        raise GaceError(f"store was built with radius {norm.radius} but the "
                        f"training config requests {cfg.radius}; rebuild the "
                        "store")
    toggles = {g: g not in cfg.ablate for g in ("box", "count", "angle",
                                                "stats")}
    mask = ablation_mask(norm, **toggles)
    model = build_model(norm, seed=cfg.seed, hidden=cfg.hidden,
                        f_i_dim=cfg.f_i_dim, f_c_dim=cfg.f_c_dim,
                        fusion_hidden=cfg.fusion_hidden, feature_mask=mask,
                        use_instance=cfg.use_instance,
                        use_context=cfg.use_context,
                        detach_context=cfg.detach_context)
    loss_cfg = cfg.loss_config()
    params = model_params(model)
    state = AdamState.init(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 0x5f3759df])
    acc = [np.zeros_like(p) for p in params]
    history = []

    for epoch in range(1, cfg.epochs + 1):
        t_start = time.perf_counter()
        perm = shuffle_rng.permutation(len(store.records))
        focal_sum = 0.0
        l1_sum = 0.0
        n_seen = 0
        for lo in range(0, perm.size, cfg.batch_frames):
            batch = perm[lo:lo + cfg.batch_frames]
            for a in acc:
                a[...] = 0.0
            m = 0
            for fidx in batch:
                rec = store.records[fidx]
                if rec.n == 0:
                    continue
                grads, (fs, ls, n) = backward(model, rec.inputs(), rec.u,
                                              rec.v, loss_cfg, scale=1.0)
                if not (np.isfinite(fs) and np.isfinite(ls)):
                    raise GaceError(
                        f"non-finite loss at epoch {epoch}, frame "
                        f"{rec.frame_id!r} (focal={fs}, l1={ls}); aborting")
                for a, g in zip(acc, grad_list(grads, model)):
                    a += g
                focal_sum += fs
                l1_sum += ls
                m += n
            if m == 0:
                continue
            inv = 1.0 / m
            for a in acc:
                a *= inv
            adam_step(params, acc, state, cfg.lr)
            n_seen += m
        mf = focal_sum / max(n_seen, 1)
        ml = l1_sum / max(n_seen, 1)
        stats = EpochStats(epoch, mf + cfg.lambda_iou * ml, mf, ml,
                           time.perf_counter() - t_start)
        history.append(stats)
        if log_fn is not None:
            log_fn(stats)
    return model, history


def predict_store(model: GaceModel, store: TrainingStore):
    """Forward every stored frame; returns concatenated (s_hat, u)."""
    outs, labels = [], []
    for rec in store.records:
        if rec.n == 0:
            continue
        s_hat, _ = gace_forward(model, rec.inputs())
        outs.append(np.asarray(s_hat, dtype=np.float64))
        labels.append(rec.u)
    if not outs:
        return np.zeros(0), np.zeros(0, dtype=np.int8)
    return np.concatenate(outs), np.concatenate(labels)


class Rescorer:
    """Reusable inference wrapper holding a float32 copy of the model."""

    def __init__(self, model: GaceModel):
        self.norm_config = model.norm_config
        self._model32 = model.astype(np.float32)

    def rescore(self, frame: Frame, timings: dict | None = None) -> np.ndarray:
        """New confidence scores for one frame, in detection order.

        Boxes and classes are untouched; this is confidence-only
        refinement. Raises when the frame's point channels cannot satisfy
        the model's configuration.
        """
        inputs = prepare_frame_inputs(frame, self.norm_config, timings)
        if inputs.n == 0:
            return np.zeros(0)
        s_hat, _ = gace_forward(self._model32, inputs, timings=timings)
        return s_hat.astype(np.float64)

    def rescore_many(self, frames, n_threads: int | None = None) -> list:
        """Rescore a batch of frames, optionally with a worker pool."""
        if n_threads is None:
            n_threads = env_threads()
        return _map_frames(self.rescore, frames, n_threads)


def rescore(model: GaceModel, frame: Frame) -> np.ndarray:
    """One-off rescoring; build a :class:`Rescorer` to process many frames."""
    return Rescorer(model).rescore(frame)
