"""Training-target assignment: TP/FP labels and IoU regression targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox3D, pairwise_iou3d


@dataclass(frozen=True)
class Detection:
    """One detector output: box, class id and confidence score in [0, 1]."""

    box: BoundingBox3D
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be nonnegative, got {self.class_id}")


@dataclass(frozen=True)
class GroundTruth:
    """One annotated object: box and class id."""

    box: BoundingBox3D
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be nonnegative, got {self.class_id}")


@dataclass(frozen=True)
class LabeledDetection:
    """Detection plus its binary TP label u and IoU target v."""

    detection: Detection
    u: int
    v: float


def default_thresholds(class_count: int) -> tuple:
    """Per-class IoU thresholds: 0.7 for class 0 (vehicle-like), 0.5 otherwise."""
    return tuple(0.7 if c == 0 else 0.5 for c in range(class_count))


def assign_labels(detections, ground_truth, thresholds) -> list:
    """Attach TP/FP labels and IoU targets to one frame's detections.

    v is the maximum same-class 3D IoU against any ground-truth box (0 if
    none exist). u comes from greedy one-to-one matching: detections in
    descending score order (ties by input index) each claim the unmatched
    same-class gt with the highest IoU, provided that IoU clears the class
    threshold. Output order equals input order.

    Args:
        detections: sequence of Detection (one frame).
        ground_truth: sequence of GroundTruth (same frame).
        thresholds: per-class IoU thresholds, indexed by class id.

    Returns:
        List of LabeledDetection aligned with the input detections.
    """
    n, m = len(detections), len(ground_truth)
    for det in detections:
        if det.class_id >= len(thresholds):
            raise ValueError(f"no IoU threshold for class {det.class_id}")
    if n == 0:
        return []
    if m == 0:
        return [LabeledDetection(d, 0, 0.0) for d in detections]

    iou = pairwise_iou3d([d.box for d in detections],
                         [g.box for g in ground_truth])
    det_cls = np.array([d.class_id for d in detections])
    gt_cls = np.array([g.class_id for g in ground_truth])
    same = det_cls[:, None] == gt_cls[None, :]
    iou = np.where(same, iou, 0.0)

    v = np.where(same.any(axis=1), iou.max(axis=1, initial=0.0), 0.0)

    order = sorted(range(n), key=lambda i: (-detections[i].score, i))
    gt_taken = np.zeros(m, dtype=bool)
    u = np.zeros(n, dtype=np.int64)
    for i in order:
        thr = thresholds[detections[i].class_id]
        best_j = -1
        best_iou = 0.0
        for j in range(m):
            if gt_taken[j] or not same[i, j]:
                continue
            if iou[i, j] >= thr and iou[i, j] > best_iou:
                best_iou = iou[i, j]
                best_j = j
        if best_j >= 0:
            u[i] = 1
            gt_taken[best_j] = True

    return [LabeledDetection(detections[i], int(u[i]), float(v[i]))
            for i in range(n)]
