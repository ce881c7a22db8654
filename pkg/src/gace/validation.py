"""Input validation helpers shared by the estimator facade and the trainer."""

from __future__ import annotations

import numpy as np

from .errors import GaceError


def check_points(points, name: str = "points") -> np.ndarray:
    """Validate a point array: 2D, at least 3 channels, finite coordinates."""
    pts = np.asarray(points)
    if pts.ndim != 2:
        raise GaceError(f"{name} must be a 2D (N, C) array, got ndim={pts.ndim}")
    if pts.shape[0] > 0:
        if pts.shape[1] < 3:
            raise GaceError(f"{name} needs at least x, y, z channels, "
                            f"got {pts.shape[1]}")
        if not np.isfinite(pts[:, :3]).all():
            raise GaceError(f"{name} contains non-finite coordinates")
    return pts


def check_frame(frame, *, require_ground_truth: bool = False,
                min_channels: int | None = None,
                class_count: int | None = None):
    """Validate one frame against the configuration it will be used with."""
    check_points(frame.points, name=f"frame {frame.frame_id!r} points")
    if min_channels is not None and frame.points.shape[0] > 0 \
            and frame.points.shape[1] < min_channels:
        raise GaceError(
            f"frame {frame.frame_id!r} has {frame.points.shape[1]} point "
            f"channels but the configuration requires {min_channels} "
            f"({'with' if min_channels >= 5 else 'without'} elongation)")
    if require_ground_truth and frame.ground_truth is None:
        raise GaceError(f"frame {frame.frame_id!r} has no ground truth")
    if class_count is not None:
        for det in frame.detections:
            if det.class_id >= class_count:
                raise GaceError(
                    f"frame {frame.frame_id!r}: detection class "
                    f"{det.class_id} exceeds configured class count "
                    f"{class_count}")
        for gt in frame.ground_truth or ():
            if gt.class_id >= class_count:
                raise GaceError(
                    f"frame {frame.frame_id!r}: ground-truth class "
                    f"{gt.class_id} exceeds configured class count "
                    f"{class_count}")
    return frame
