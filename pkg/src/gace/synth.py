"""Deterministic synthetic benchmark: scenes, LiDAR-like points and a
simulated black-box detector with geometry-conditioned error statistics.

Scenes place non-overlapping objects (optionally in pedestrian clusters and
vehicle convoys) inside a field-of-view disk around the sensor, sample
surface points on visible box faces with density proportional to
1 / range^2, and sprinkle ground clutter. The simulated detector emits
jittered true positives whose scores correlate only loosely with quality,
plus near-miss and empty-space false positives whose rates and scores
depend on planted geometric bands (object length, viewing angle, point
count). Everything is reproducible from the seeds.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (BoundingBox3D, PointGrid, bev_overlap_area,
                       boxes_to_array, viewing_angle, wrap_angle)
from .supervision import Detection, GroundTruth, default_thresholds
from .trainer import Frame

logger = logging.getLogger(__name__)

CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")


@dataclass(frozen=True)
class ClassSpec:
    """Per-class population statistics for scene generation."""

    name: str
    count_mean: float
    # (weight, (len_lo, len_hi), (wid_lo, wid_hi), (hgt_lo, hgt_hi)) modes
    size_modes: tuple
    group_style: str = "cluster"     # "cluster" or "convoy"
    group_prob: float = 0.0
    group_extra: tuple = (1, 3)      # additional members (min, max)
    group_spacing: tuple = (1.0, 3.0)


def default_class_specs() -> tuple:
    # Vehicle lengths are bimodal: passenger cars plus a heavier 6-13 m mode.
    vehicle = ClassSpec(
        "vehicle", count_mean=8.0,
        size_modes=((0.75, (4.0, 5.0), (1.7, 2.1), (1.4, 1.9)),
                    (0.25, (6.0, 13.0), (2.2, 2.9), (2.5, 4.0))),
        group_style="convoy", group_prob=0.35, group_extra=(1, 3),
        group_spacing=(2.0, 7.0))
    pedestrian = ClassSpec(
        "pedestrian", count_mean=6.0,
        size_modes=((1.0, (0.6, 1.0), (0.6, 1.0), (1.5, 2.0)),),
        group_style="cluster", group_prob=0.5, group_extra=(1, 4),
        group_spacing=(1.0, 3.0))
    cyclist = ClassSpec(
        "cyclist", count_mean=4.0,
        size_modes=((1.0, (1.5, 2.1), (0.5, 0.8), (1.4, 1.9)),),
        group_style="cluster", group_prob=0.3, group_extra=(1, 2),
        group_spacing=(1.5, 4.0))
    return (vehicle, pedestrian, cyclist)


@dataclass(frozen=True)
class SceneConfig:
    """Scene generator configuration; the seed fixes everything."""

    seed: int
    n_frames: int = 100
    fov_radius: float = 75.0
    min_range: float = 4.0
    ground_z: float = -1.8
    classes: tuple = field(default_factory=default_class_specs)
    occlusion_rate: float = 0.3
    point_density: float = 5000.0     # expected face points ~ density*A/r^2
    max_object_points: int = 1200
    clutter_points: float = 2500.0    # expected ground-clutter points
    clutter_columns: float = 12.0     # expected pole/bush clusters
    channels: int = 5
    placement_retries: int = 20

    def __post_init__(self):
        if self.n_frames < 0 or self.fov_radius <= 0:
            raise ValueError("n_frames must be >= 0 and fov_radius > 0")
        if self.channels not in (4, 5):
            raise ValueError("channels must be 4 or 5")


@dataclass(frozen=True)
class DetectorErrorModel:
    """Error statistics of the simulated black-box detector.

    The hard bands plant the geometric failure modes: long vehicles,
    head-on viewing angles and sparse boxes get depressed TP scores and
    boosted FP scores, creating the precision dips a geometric rescorer
    can exploit.
    """

    det_prob_max: float = 0.97
    det_count_tau: float = 8.0       # <= 0 means detection prob = det_prob_max
    pos_jitter: float = 0.10
    dim_jitter: float = 0.04
    yaw_jitter: float = 0.05
    heading_flip_rate: float = 0.06
    class_confusion: float = 0.03
    tp_score_mu: float = 0.64
    tp_score_sigma: float = 0.16
    score_quality_corr: float = 0.45
    fp_score_mu: float = 0.45
    fp_score_sigma: float = 0.18
    fp_near_rate: float = 0.30       # near-miss FPs per ground-truth object
    fp_clutter_per_frame: float = 7.0
    hard_length_band: tuple = (6.0, 13.0)
    hard_length_tp_penalty: float = 0.18
    hard_length_fp_boost: float = 0.15
    hard_angle_min: float = 2.1      # |viewing angle| above this is hard
    hard_angle_tp_penalty: float = 0.08
    hard_angle_fp_boost: float = 0.08
    sparse_count: int = 12
    sparse_tp_penalty: float = 0.10
    sparse_fp_boost: float = 0.12
    score_floor: float = 0.01
    score_ceil: float = 0.99


def error_model_a() -> DetectorErrorModel:
    """Default planted error statistics ("detector A")."""
    return DetectorErrorModel()


def error_model_b() -> DetectorErrorModel:
    """A second detector with shifted score statistics and error rates.

    Same geometric failure modes as detector A, so a rescorer that keys on
    geometry transfers; different score distributions, jitters and rates.
    """
    return DetectorErrorModel(
        det_prob_max=0.95, det_count_tau=10.0, pos_jitter=0.14,
        dim_jitter=0.06, yaw_jitter=0.08, heading_flip_rate=0.10,
        class_confusion=0.05, tp_score_mu=0.58, tp_score_sigma=0.20,
        score_quality_corr=0.35, fp_score_mu=0.47, fp_score_sigma=0.20,
        fp_near_rate=0.40, fp_clutter_per_frame=9.0,
        hard_length_tp_penalty=0.15, hard_length_fp_boost=0.17,
        hard_angle_tp_penalty=0.10, hard_angle_fp_boost=0.06,
        sparse_tp_penalty=0.12, sparse_fp_boost=0.15)


def _sample_size(rng, spec: ClassSpec):
    weights = np.array([m[0] for m in spec.size_modes])
    mode = spec.size_modes[rng.choice(weights.size, p=weights / weights.sum())]
    return (rng.uniform(*mode[1]), rng.uniform(*mode[2]), rng.uniform(*mode[3]))


def _overlaps_any(box: BoundingBox3D, placed) -> bool:
    for other in placed:
        reach = 0.5 * (math.hypot(box.dx, box.dy)
                       + math.hypot(other.dx, other.dy))
        if (box.cx - other.cx) ** 2 + (box.cy - other.cy) ** 2 > reach ** 2:
            continue
        if bev_overlap_area(box, other) > 0.0:
            return True
    return False


def _place_objects(rng, cfg: SceneConfig):
    gts = []
    placed = []
    failures = 0
    u_min = (cfg.min_range / cfg.fov_radius) ** 2
    for class_id, spec in enumerate(cfg.classes):
        n_seeds = rng.poisson(spec.count_mean)
        for _ in range(n_seeds):
            members = 0
            if spec.group_prob > 0 and rng.random() < spec.group_prob:
                members = rng.integers(spec.group_extra[0],
                                       spec.group_extra[1] + 1)
            anchor = None
            for attempt in range(cfg.placement_retries):
                l, w, h = _sample_size(rng, spec)
                r = cfg.fov_radius * math.sqrt(rng.uniform(u_min, 1.0))
                theta = rng.uniform(-math.pi, math.pi)
                yaw = rng.uniform(-math.pi, math.pi)
                cz = cfg.ground_z + h / 2 + rng.normal(0.0, 0.03)
                box = BoundingBox3D(r * math.cos(theta), r * math.sin(theta),
                                    cz, l, w, h, yaw)
                if not _overlaps_any(box, placed):
                    anchor = box
                    break
            if anchor is None:
                failures += 1
                continue
            placed.append(anchor)
            gts.append(GroundTruth(anchor, class_id))
            for _ in range(members):
                ok = None
                for attempt in range(cfg.placement_retries):
                    l, w, h = _sample_size(rng, spec)
                    if spec.group_style == "convoy":
                        gap = rng.uniform(*spec.group_spacing)
                        step = (anchor.dx / 2 + gap + l / 2)
                        sign = -1.0 if rng.random() < 0.5 else 1.0
                        mult = 1 + rng.integers(0, 2)
                        cx = anchor.cx + sign * mult * step * math.cos(anchor.yaw)
                        cy = anchor.cy + sign * mult * step * math.sin(anchor.yaw)
                        yaw = wrap_angle(anchor.yaw + rng.normal(0.0, 0.08))
                    else:
                        d = rng.uniform(*spec.group_spacing)
                        phi = rng.uniform(-math.pi, math.pi)
                        cx = anchor.cx + d * math.cos(phi)
                        cy = anchor.cy + d * math.sin(phi)
                        yaw = rng.uniform(-math.pi, math.pi)
                    if math.hypot(cx, cy) < cfg.min_range \
                            or math.hypot(cx, cy) > cfg.fov_radius:
                        continue
                    cz = cfg.ground_z + h / 2 + rng.normal(0.0, 0.03)
                    box = BoundingBox3D(cx, cy, cz, l, w, h, float(yaw))
                    if not _overlaps_any(box, placed):
                        ok = box
                        break
                if ok is None:
                    failures += 1
                    continue
                placed.append(ok)
                gts.append(GroundTruth(ok, class_id))
    if failures:
        logger.debug("placement gave up on %d objects after bounded retries",
                     failures)
    return gts


# Box faces: (axis, sign). Local +x is the heading direction, so the -x
# face is the rear of the object.
_FACES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0))


def _sample_object_points(rng, box: BoundingBox3D, class_id: int,
                          cfg: SceneConfig) -> np.ndarray:
    rng_range = math.hypot(box.cx, box.cy)
    if rng_range < 1e-6:
        rng_range = 1e-6
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # Sensor position in the box frame decides which faces are visible.
    sx = (-box.cx) * c + (-box.cy) * s
    sy = -(-box.cx) * s + (-box.cy) * c
    sz = -box.cz
    half = (box.dx / 2, box.dy / 2, box.dz / 2)
    sensor_local = (sx, sy, sz)
    dims = (box.dx, box.dy, box.dz)

    occluded = rng.random() < cfg.occlusion_rate
    chunks = []
    for axis, sign in _FACES:
        if sensor_local[axis] * sign <= half[axis]:
            continue
        o1, o2 = [a for a in (0, 1, 2) if a != axis]
        area = dims[o1] * dims[o2]
        expected = cfg.point_density * area / (rng_range * rng_range)
        n = rng.poisson(expected)
        if n == 0 and expected >= 0.5:
            n = 1  # angular-resolution floor for clearly visible faces
        if occluded:
            if rng.random() < 0.5:
                n = 0
            else:
                n = int(n * rng.uniform(0.3, 0.7))
        if n == 0:
            continue
        local = np.zeros((n, 3))
        local[:, axis] = sign * half[axis] + rng.normal(0.0, 0.015, n)
        local[:, o1] = rng.uniform(-half[o1], half[o1], n)
        local[:, o2] = rng.uniform(-half[o2], half[o2], n)
        pts = np.zeros((n, 5))
        pts[:, 0] = box.cx + local[:, 0] * c - local[:, 1] * s
        pts[:, 1] = box.cy + local[:, 0] * s + local[:, 1] * c
        pts[:, 2] = box.cz + local[:, 2]
        if class_id == 0 and axis == 0 and sign < 0:
            # Rear faces of vehicles reflect brightly (license-plate effect),
            # so viewing-angle features carry intensity signal.
            pts[:, 3] = rng.uniform(0.5, 0.95, n)
        else:
            pts[:, 3] = rng.uniform(0.05, 0.5, n)
        pts[:, 4] = rng.uniform(0.0, 0.25, n)
        chunks.append(pts)
    if not chunks:
        return np.zeros((0, 5))
    pts = np.concatenate(chunks)
    if pts.shape[0] > cfg.max_object_points:
        keep = rng.permutation(pts.shape[0])[:cfg.max_object_points]
        pts = pts[np.sort(keep)]
    return pts


def _sample_clutter(rng, cfg: SceneConfig) -> np.ndarray:
    chunks = []
    n_ground = rng.poisson(cfg.clutter_points)
    if n_ground > 0:
        r = cfg.fov_radius * np.sqrt(rng.uniform(0.0, 1.0, n_ground))
        th = rng.uniform(-math.pi, math.pi, n_ground)
        pts = np.zeros((n_ground, 5))
        pts[:, 0] = r * np.cos(th)
        pts[:, 1] = r * np.sin(th)
        pts[:, 2] = cfg.ground_z + np.abs(rng.normal(0.0, 0.12, n_ground))
        pts[:, 3] = rng.uniform(0.0, 0.6, n_ground)
        pts[:, 4] = rng.uniform(0.0, 0.4, n_ground)
        chunks.append(pts)
    n_cols = rng.poisson(cfg.clutter_columns)
    for _ in range(n_cols):
        rad = cfg.fov_radius * math.sqrt(rng.uniform(0.05, 1.0))
        th = rng.uniform(-math.pi, math.pi)
        cx, cy = rad * math.cos(th), rad * math.sin(th)
        col_r = rng.uniform(0.2, 0.8)
        col_h = rng.uniform(0.5, 2.2)
        expected = cfg.point_density * col_r * col_h * 2.0 / (rad * rad)
        n = rng.poisson(expected)
        if n == 0:
            continue
        phi = rng.uniform(-math.pi, math.pi, n)
        pts = np.zeros((n, 5))
        pts[:, 0] = cx + col_r * np.cos(phi)
        pts[:, 1] = cy + col_r * np.sin(phi)
        pts[:, 2] = cfg.ground_z + rng.uniform(0.0, col_h, n)
        pts[:, 3] = rng.uniform(0.05, 0.7, n)
        pts[:, 4] = rng.uniform(0.0, 0.5, n)
        chunks.append(pts)
    if not chunks:
        return np.zeros((0, 5))
    return np.concatenate(chunks)


def generate_scene(cfg: SceneConfig, frame_index: int) -> Frame:
    """One deterministic frame with ground truth and points (no detections).

    The per-frame generator is seeded with (cfg.seed, frame_index), so
    frames can be produced independently and in parallel.
    """
    rng = np.random.default_rng([cfg.seed, frame_index])
    gts = _place_objects(rng, cfg)
    chunks = [_sample_object_points(rng, g.box, g.class_id, cfg) for g in gts]
    chunks.append(_sample_clutter(rng, cfg))
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 5))
    if cfg.channels == 4:
        pts = pts[:, :4]
    return Frame(frame_id=f"{frame_index:06d}",
                 points=np.ascontiguousarray(pts, dtype=np.float32),
                 detections=[], ground_truth=gts)


def _frame_rng(seed: int, frame_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(frame_id.encode())])


def _jittered_box(rng, box: BoundingBox3D, em: DetectorErrorModel):
    c = np.array([box.cx, box.cy, box.cz])
    c[:2] += rng.normal(0.0, em.pos_jitter, 2)
    c[2] += rng.normal(0.0, em.pos_jitter / 2)
    dims = np.array([box.dx, box.dy, box.dz])
    dims *= np.exp(rng.normal(0.0, em.dim_jitter, 3))
    yaw = box.yaw + rng.normal(0.0, em.yaw_jitter)
    if rng.random() < em.heading_flip_rate:
        yaw += math.pi
    return BoundingBox3D(c[0], c[1], c[2], dims[0], dims[1], dims[2],
                         float(wrap_angle(yaw)))


def _near_miss_box(rng, box: BoundingBox3D, same_class_boxes, thr: float,
                   em: DetectorErrorModel):
    # Shift a copy of the gt box until its IoU against every same-class gt
    # drops safely below the TP threshold.
    from .geometry import iou3d
    for scale in (0.7, 0.9, 1.2, 1.6, 2.2):
        phi = rng.uniform(-math.pi, math.pi)
        d = scale * max(box.dx, box.dy)
        cand = BoundingBox3D(
            box.cx + d * math.cos(phi), box.cy + d * math.sin(phi),
            box.cz + rng.normal(0.0, 0.05),
            box.dx * math.exp(rng.normal(0.0, 0.08)),
            box.dy * math.exp(rng.normal(0.0, 0.08)),
            box.dz * math.exp(rng.normal(0.0, 0.08)),
            float(wrap_angle(box.yaw + rng.normal(0.0, 0.3))))
        worst = max((iou3d(cand, other) for other in same_class_boxes),
                    default=0.0)
        if worst < thr - 0.03:
            return cand
    return None


def _band_adjust(em: DetectorErrorModel, box: BoundingBox3D, class_id: int,
                 n_points: int, is_tp: bool) -> float:
    adj = 0.0
    lo, hi = em.hard_length_band
    if class_id == 0 and lo <= box.dx <= hi:
        adj += -em.hard_length_tp_penalty if is_tp else em.hard_length_fp_boost
    if abs(viewing_angle(box)) >= em.hard_angle_min:
        adj += -em.hard_angle_tp_penalty if is_tp else em.hard_angle_fp_boost
    if n_points < em.sparse_count:
        adj += -em.sparse_tp_penalty if is_tp else em.sparse_fp_boost
    return adj


def simulate_detector(frame: Frame, em: DetectorErrorModel,
                      seed: int) -> list:
    """Emit detections for a frame with ground truth.

    For each ground-truth object a jittered detection appears with a
    probability that grows with its point count; near-miss and clutter
    false positives are injected at the configured geometry-conditioned
    rates. Scores correlate only imperfectly with quality.
    """
    if frame.ground_truth is None:
        raise ValueError(f"frame {frame.frame_id!r} has no ground truth")
    from .geometry import iou3d

    rng = _frame_rng(seed, frame.frame_id)
    gts = frame.ground_truth
    class_count = max((g.class_id for g in gts), default=0) + 1
    class_count = max(class_count, len(CLASS_NAMES))
    thresholds = default_thresholds(class_count)

    grid = PointGrid(frame.points)
    gt_boxes = boxes_to_array([g.box for g in gts])
    _, gt_off = grid.query_boxes(gt_boxes)
    gt_counts = np.diff(gt_off)

    by_class = {}
    for g in gts:
        by_class.setdefault(g.class_id, []).append(g.box)

    cand = []  # (box, class_id, is_tp, quality)
    for gi, gt in enumerate(gts):
        n_pts = int(gt_counts[gi]) if gts else 0
        if em.det_count_tau <= 0:
            p_det = em.det_prob_max
        else:
            p_det = em.det_prob_max * (1.0 - math.exp(-n_pts / em.det_count_tau))
        if rng.random() < p_det:
            box = _jittered_box(rng, gt.box, em)
            class_id = gt.class_id
            if rng.random() < em.class_confusion and class_count > 1:
                others = [c for c in range(class_count) if c != gt.class_id]
                class_id = int(rng.choice(others))
            cand.append((box, class_id, True, iou3d(box, gt.box)))
        if rng.random() < em.fp_near_rate:
            nm = _near_miss_box(rng, gt.box, by_class[gt.class_id],
                                thresholds[gt.class_id], em)
            if nm is not None:
                cand.append((nm, gt.class_id, False, 0.0))

    n_clutter = rng.poisson(em.fp_clutter_per_frame)
    specs = default_class_specs()
    fov = max((math.hypot(g.box.cx, g.box.cy) for g in gts), default=50.0)
    fov = max(fov, 20.0)
    for _ in range(n_clutter):
        class_id = int(rng.integers(0, len(specs)))
        l, w, h = _sample_size(rng, specs[class_id])
        r = fov * math.sqrt(rng.uniform(0.01, 1.0))
        th = rng.uniform(-math.pi, math.pi)
        box = BoundingBox3D(r * math.cos(th), r * math.sin(th),
                            frame.points[:, 2].mean() + h / 2
                            if frame.points.shape[0] else h / 2,
                            l, w, h, rng.uniform(-math.pi, math.pi))
        cand.append((box, class_id, False, 0.0))

    if not cand:
        return []
    det_boxes = boxes_to_array([c[0] for c in cand])
    _, det_off = grid.query_boxes(det_boxes)
    det_counts = np.diff(det_off)

    noise = rng.normal(0.0, 1.0, len(cand))
    dets = []
    for k, (box, class_id, is_tp, quality) in enumerate(cand):
        if is_tp:
            score = (em.tp_score_mu
                     + em.score_quality_corr * (quality - 0.75)
                     + _band_adjust(em, box, class_id, int(det_counts[k]), True)
                     + em.tp_score_sigma * noise[k])
        else:
            score = (em.fp_score_mu
                     + _band_adjust(em, box, class_id, int(det_counts[k]), False)
                     + em.fp_score_sigma * noise[k])
        score = float(min(max(score, em.score_floor), em.score_ceil))
        dets.append(Detection(box, class_id, score))
    order = rng.permutation(len(dets))
    return [dets[i] for i in order]


def generate_frames(scene_cfg: SceneConfig,
                    error_model: DetectorErrorModel | None = None,
                    det_seed: int | None = None):
    """Yield frames with ground truth and, when an error model is given,
    simulated detections."""
    if error_model is not None and det_seed is None:
        det_seed = scene_cfg.seed + 1
    for i in range(scene_cfg.n_frames):
        frame = generate_scene(scene_cfg, i)
        if error_model is not None:
            frame.detections = simulate_detector(frame, error_model, det_seed)
        yield frame


# Shipped benchmark presets ("bench-v1"): 400 training frames and 100
# evaluation frames with geometry-conditioned detector errors, plus a
# transfer evaluation set with a different scene seed for error model B.

BENCH_V1_TRAIN_SEED = 61001
BENCH_V1_EVAL_SEED = 61002
BENCH_V1_TRANSFER_SEED = 61003
BENCH_V1_DET_SEED = 71001


def bench_v1_train_config() -> SceneConfig:
    return SceneConfig(seed=BENCH_V1_TRAIN_SEED, n_frames=400)


def bench_v1_eval_config() -> SceneConfig:
    return SceneConfig(seed=BENCH_V1_EVAL_SEED, n_frames=100)


def bench_v1_transfer_config() -> SceneConfig:
    return SceneConfig(seed=BENCH_V1_TRANSFER_SEED, n_frames=100)


def throughput_config(seed: int = 61009, n_frames: int = 30) -> SceneConfig:
    """Dense frames (~100 detections, ~100k points) for runtime benchmarks."""
    specs = default_class_specs()
    dense = tuple(replace(s, count_mean=m) for s, m in
                  zip(specs, (40.0, 25.0, 12.0)))
    return SceneConfig(seed=seed, n_frames=n_frames, classes=dense,
                       point_density=9000.0, clutter_points=68000.0,
                       clutter_columns=60.0, max_object_points=2500)
