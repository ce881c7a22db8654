"""Raw input vectors for the instance and context networks.

The instance vector layout (length 13 + 4 * n_stats_channels + class_count):

    0..2   cx, cy normalized by max_range; cz normalized into z_range
    3..5   dx, dy, dz normalized by max_dims
    6..7   cos(yaw), sin(yaw)
    8      detector score
    9..10  cos(alpha), sin(alpha)  (viewing angle)
    11     ||c|| / max_range
    12     min(point count, max_points) / max_points
    13..   point statistics flattened [means, stds, mins, maxs]
    then   one-hot class

Every entry is clamped to [-1, 1]; out-of-range inputs saturate so a model
can be applied to data whose metric ranges exceed the training ranges.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GaceError
from .geometry import (CHANNEL_INDEX, BoundingBox3D, boxes_to_array,
                       canonicalize, point_statistics, wrap_angle)

FEATURE_GROUPS = ("box", "count", "angle", "stats")


@dataclass(frozen=True)
class NormConfig:
    """Normalization constants and feature configuration.

    These constants are serialized into the model file; applying a model to
    another dataset reuses the ranges it was trained with.
    """

    max_range: float = 80.0
    z_range: tuple = (-3.0, 8.0)
    max_dims: tuple = (25.0, 5.0, 8.0)
    max_points: int = 4096
    radius: float = 40.0
    class_count: int = 3
    stats_channels: tuple = ("x", "y", "z", "intensity", "elongation")
    use_elongation: bool = True

    def __post_init__(self):
        if self.max_range <= 0 or self.max_points <= 0 or self.radius <= 0:
            raise ValueError("normalization bounds must be strictly positive")
        if not all(d > 0 for d in self.max_dims):
            raise ValueError("max_dims must be strictly positive")
        if self.z_range[1] <= self.z_range[0]:
            raise ValueError(f"invalid z_range {self.z_range}")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        channels = tuple(self.stats_channels)
        if not self.use_elongation:
            channels = tuple(c for c in channels if c != "elongation")
        for c in channels:
            if c not in CHANNEL_INDEX:
                raise ValueError(f"unknown statistics channel {c!r}")
        if len(set(channels)) != len(channels):
            raise ValueError("duplicate statistics channels")
        object.__setattr__(self, "stats_channels", channels)
        object.__setattr__(self, "z_range", tuple(float(v) for v in self.z_range))
        object.__setattr__(self, "max_dims", tuple(float(v) for v in self.max_dims))

    @property
    def n_stats_channels(self) -> int:
        return len(self.stats_channels)

    @property
    def instance_dim(self) -> int:
        return 13 + 4 * self.n_stats_channels + self.class_count

    @property
    def neighbor_geo_dim(self) -> int:
        return 6 + self.class_count

    @property
    def required_channels(self) -> int:
        """Point-array columns needed: 5 with elongation, 4 without."""
        return 5 if self.use_elongation else 4

    @property
    def stats_channel_indices(self) -> np.ndarray:
        return np.array([CHANNEL_INDEX[c] for c in self.stats_channels],
                        dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "max_range": self.max_range,
            "z_range": list(self.z_range),
            "max_dims": list(self.max_dims),
            "max_points": self.max_points,
            "radius": self.radius,
            "class_count": self.class_count,
            "stats_channels": list(self.stats_channels),
            "use_elongation": self.use_elongation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormConfig":
        return cls(max_range=d["max_range"], z_range=tuple(d["z_range"]),
                   max_dims=tuple(d["max_dims"]), max_points=d["max_points"],
                   radius=d["radius"], class_count=d["class_count"],
                   stats_channels=tuple(d["stats_channels"]),
                   use_elongation=d["use_elongation"])

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def feature_group_indices(cfg: NormConfig) -> dict:
    """Instance-vector index sets for the four toggleable feature groups.

    The score entry and the class one-hot belong to no group and are
    always active.
    """
    n_stats = 4 * cfg.n_stats_channels
    return {
        "box": np.array([0, 1, 2, 3, 4, 5, 6, 7, 11], dtype=np.int64),
        "count": np.array([12], dtype=np.int64),
        "angle": np.array([9, 10], dtype=np.int64),
        "stats": np.arange(13, 13 + n_stats, dtype=np.int64),
    }


def ablation_mask(cfg: NormConfig, *, box: bool = True, count: bool = True,
                  angle: bool = True, stats: bool = True) -> np.ndarray:
    """0/1 mask over instance-vector entries for feature-group ablations.

    Masked entries are zeroed before the instance network; the vector
    length is unchanged so one architecture serves every ablation.
    """
    mask = np.ones(cfg.instance_dim)
    groups = feature_group_indices(cfg)
    for name, on in (("box", box), ("count", count),
                     ("angle", angle), ("stats", stats)):
        if not on:
            mask[groups[name]] = 0.0
    return mask


def instance_matrix(boxes_arr: np.ndarray, scores: np.ndarray,
                    classes: np.ndarray, stats: np.ndarray,
                    counts: np.ndarray, cfg: NormConfig) -> np.ndarray:
    """Batched instance vectors for one frame.

    Args:
        boxes_arr: (N, 7) box parameters.
        scores: (N,) detector scores.
        classes: (N,) class ids.
        stats: (N, 4, C) canonical point statistics (mean, std, min, max).
        counts: (N,) in-box point counts.
        cfg: normalization constants.

    Returns:
        (N, instance_dim) float64 matrix, every entry in [-1, 1].
    """
    n = boxes_arr.shape[0]
    out = np.zeros((n, cfg.instance_dim))
    if n == 0:
        return out
    cx, cy, cz = boxes_arr[:, 0], boxes_arr[:, 1], boxes_arr[:, 2]
    yaw = boxes_arr[:, 6]
    z_lo, z_hi = cfg.z_range
    out[:, 0] = cx / cfg.max_range
    out[:, 1] = cy / cfg.max_range
    out[:, 2] = (cz - z_lo) / (z_hi - z_lo)
    out[:, 3] = boxes_arr[:, 3] / cfg.max_dims[0]
    out[:, 4] = boxes_arr[:, 4] / cfg.max_dims[1]
    out[:, 5] = boxes_arr[:, 5] / cfg.max_dims[2]
    out[:, 6] = np.cos(yaw)
    out[:, 7] = np.sin(yaw)
    out[:, 8] = scores
    # atan2(0, 0) = 0, so the degenerate center yields alpha = yaw.
    alpha = wrap_angle(yaw - np.arctan2(cy, cx))
    out[:, 9] = np.cos(alpha)
    out[:, 10] = np.sin(alpha)
    out[:, 11] = np.sqrt(cx * cx + cy * cy + cz * cz) / cfg.max_range
    out[:, 12] = np.minimum(counts, cfg.max_points) / cfg.max_points
    ns = 4 * cfg.n_stats_channels
    out[:, 13:13 + ns] = stats.reshape(n, ns)
    out[np.arange(n), 13 + ns + np.asarray(classes, dtype=np.int64)] = 1.0
    np.clip(out, -1.0, 1.0, out=out)
    return out


def instance_input(det, in_box_points: np.ndarray,
                   cfg: NormConfig) -> np.ndarray:
    """Instance vector for a single detection.

    ``in_box_points`` must already be restricted to the detection's box
    (the output of the in-box query).
    """
    pts = np.asarray(in_box_points, dtype=np.float64)
    if pts.shape[0] > 0 and pts.shape[1] < cfg.required_channels:
        raise GaceError(
            f"points have {pts.shape[1]} channels but the configuration "
            f"requires {cfg.required_channels}")
    canon = canonicalize(pts, det.box)
    sel = cfg.stats_channel_indices
    if canon.shape[0] == 0:
        stats = point_statistics(np.zeros((0, cfg.n_stats_channels)))
    else:
        stats = point_statistics(canon[:, sel])
    stats_block = np.stack([stats.mean, stats.std, stats.min, stats.max])
    return instance_matrix(
        det.box.as_array()[None, :], np.array([det.score]),
        np.array([det.class_id]), stats_block[None, :, :],
        np.array([stats.count]), cfg)[0]


class NeighborIndex:
    """Uniform 2D grid over detection centers with cell size = radius.

    Immutable after construction; neighbor queries filter candidates from
    the 3x3 surrounding cells by exact 3D distance, so results match a
    brute-force scan.
    """

    def __init__(self, centers: np.ndarray, radius: float):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.radius = float(radius)
        self._cells = {}
        for i in range(self.centers.shape[0]):
            key = (int(math.floor(self.centers[i, 0] / self.radius)),
                   int(math.floor(self.centers[i, 1] / self.radius)))
            self._cells.setdefault(key, []).append(i)

    def neighbors(self, subject: int) -> np.ndarray:
        """Indices j != subject with 3D distance <= radius, ascending."""
        c = self.centers[subject]
        gx = int(math.floor(c[0] / self.radius))
        gy = int(math.floor(c[1] / self.radius))
        cand = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                cand.extend(self._cells.get((gx + dx, gy + dy), ()))
        cand = np.array(sorted(cand), dtype=np.int64)
        if cand.size == 0:
            return cand
        d = np.linalg.norm(self.centers[cand] - c, axis=1)
        keep = (d <= self.radius) & (cand != subject)
        return cand[keep]


def radius_neighbors(detections, subject_index: int,
                     radius: float) -> np.ndarray:
    """Indices of detections within ``radius`` (closed ball) of the subject."""
    if not 0 <= subject_index < len(detections):
        raise IndexError(f"subject index {subject_index} out of range")
    centers = boxes_to_array([d.box for d in detections])[:, :3]
    return NeighborIndex(centers, radius).neighbors(subject_index)


def neighbor_pairs(boxes_arr: np.ndarray, classes: np.ndarray,
                   cfg: NormConfig):
    """All (subject, neighbor) pairs within the configured radius.

    Returns (subject, neighbor, offsets, geo): pair index arrays grouped by
    subject with CSR offsets of shape (N + 1,), plus the (P, 6 + K)
    geometric part of each neighbor input.
    """
    n = boxes_arr.shape[0]
    offsets = np.zeros(n + 1, dtype=np.int64)
    if n == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), offsets,
                np.zeros((0, cfg.neighbor_geo_dim)))
    index = NeighborIndex(boxes_arr[:, :3], cfg.radius)
    subj, nbr = [], []
    for i in range(n):
        js = index.neighbors(i)
        subj.append(np.full(js.size, i, dtype=np.int64))
        nbr.append(js)
        offsets[i + 1] = offsets[i] + js.size
    subject = np.concatenate(subj)
    neighbor = np.concatenate(nbr)
    geo = _pair_geometry(boxes_arr, classes, subject, neighbor, cfg)
    return subject, neighbor, offsets, geo


def _pair_geometry(boxes_arr, classes, subject, neighbor, cfg) -> np.ndarray:
    p = subject.size
    geo = np.zeros((p, cfg.neighbor_geo_dim))
    if p == 0:
        return geo
    diff = boxes_arr[subject, :3] - boxes_arr[neighbor, :3]
    dist = np.linalg.norm(diff, axis=1)
    geo[:, 0] = dist / cfg.radius
    geo[:, 1:4] = diff / cfg.radius
    dyaw = wrap_angle(boxes_arr[subject, 6] - boxes_arr[neighbor, 6])
    geo[:, 4] = np.cos(dyaw)
    geo[:, 5] = np.sin(dyaw)
    geo[np.arange(p), 6 + np.asarray(classes, dtype=np.int64)[neighbor]] = 1.0
    return geo


def neighbor_input(subject, neighbor, f_i_n: np.ndarray,
                   cfg: NormConfig) -> np.ndarray:
    """Context-network input for one (subject, neighbor) detection pair.

    Concatenates the relative geometry (distance, direction, heading
    difference, neighbor class one-hot) with the neighbor's instance
    embedding ``f_i_n``.
    """
    boxes_arr = boxes_to_array([subject.box, neighbor.box])
    classes = np.array([subject.class_id, neighbor.class_id])
    geo = _pair_geometry(boxes_arr, classes, np.array([0]), np.array([1]), cfg)
    return np.concatenate([geo[0], np.asarray(f_i_n, dtype=np.float64)])
