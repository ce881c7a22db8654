"""Geometric kernels for oriented 3D boxes and LiDAR points.

Points are numpy arrays of shape (N, C) with channels
``x, y, z, intensity[, elongation]`` in the sensor frame (sensor at the
origin). Boxes are yaw-rotated (no pitch/roll) with full extents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

CHANNEL_INDEX = {"x": 0, "y": 1, "z": 2, "intensity": 3, "elongation": 4}

# On-edge classification tolerance for polygon clipping.
CLIP_TOL = 1e-9


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))


@dataclass(frozen=True)
class BoundingBox3D:
    """Oriented 3D box: center, full extents, yaw about z.

    Yaw is normalized to (-pi, pi] at construction; extents must be
    strictly positive.
    """

    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    yaw: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValueError(f"box extents must be positive, got "
                             f"({self.dx}, {self.dy}, {self.dz})")
        vals = (self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box parameters must be finite, got {vals}")
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz,
                         self.dx, self.dy, self.dz, self.yaw])

    @classmethod
    def from_array(cls, arr) -> "BoundingBox3D":
        return cls(*(float(v) for v in arr))


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into an (N, 7) float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class PointStats:
    """Per-channel mean / population std / min / max plus the point count.

    All statistics are exactly zero when the point set is empty.
    """

    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    count: int

    def flattened(self) -> np.ndarray:
        """Concatenate as [means, stds, mins, maxs]."""
        return np.concatenate([self.mean, self.std, self.min, self.max])


def viewing_angle(box: BoundingBox3D) -> float:
    """Angle between the line of sight to the box center and its heading.

    Invariant under rotating the whole scene about the sensor z-axis. For
    the degenerate center cx = cy = 0 the result is the yaw itself.
    """
    if box.cx == 0.0 and box.cy == 0.0:
        return box.yaw
    return float(wrap_angle(box.yaw - math.atan2(box.cy, box.cx)))


def angle_encode(theta):
    """Encode an angle as the unit direction vector (cos, sin)."""
    return np.cos(theta), np.sin(theta)


def _local_coords(points: np.ndarray, box: BoundingBox3D) -> np.ndarray:
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    local = np.empty_like(xyz)
    local[:, 0] = dx * c + dy * s
    local[:, 1] = -dx * s + dy * c
    local[:, 2] = xyz[:, 2] - box.cz
    return local


def points_in_box(points: np.ndarray, box: BoundingBox3D) -> np.ndarray:
    """Return the subset of points inside the box (closed containment).

    Boundary points count as inside. Use :class:`PointGrid` for batched
    queries over many boxes.
    """
    points = np.asarray(points)
    if points.shape[0] == 0:
        return points[:0]
    local = _local_coords(points, box)
    mask = ((np.abs(local[:, 0]) <= box.dx / 2)
            & (np.abs(local[:, 1]) <= box.dy / 2)
            & (np.abs(local[:, 2]) <= box.dz / 2))
    return points[mask]


def canonicalize(points: np.ndarray, box: BoundingBox3D) -> np.ndarray:
    """Map spatial channels into the box frame scaled to a unit cube.

    For points inside the box the spatial channels land in [-0.5, 0.5];
    intensity/elongation channels pass through unchanged.
    """
    points = np.asarray(points, dtype=np.float64)
    out = points.copy()
    if points.shape[0] == 0:
        return out
    local = _local_coords(points, box)
    out[:, 0] = local[:, 0] / box.dx
    out[:, 1] = local[:, 1] / box.dy
    out[:, 2] = local[:, 2] / box.dz
    return out


def point_statistics(canonical_points: np.ndarray) -> PointStats:
    """Per-channel mean, population std, min and max of canonical points.

    An empty input yields all-zero statistics with count 0 so that boxes
    containing no points still produce a defined feature block.
    """
    pts = np.asarray(canonical_points, dtype=np.float64)
    n, c = pts.shape
    if n == 0:
        z = np.zeros(c)
        return PointStats(z, z.copy(), z.copy(), z.copy(), 0)
    mean = pts.mean(axis=0)
    var = np.maximum((pts * pts).mean(axis=0) - mean * mean, 0.0)
    return PointStats(mean, np.sqrt(var), pts.min(axis=0), pts.max(axis=0), n)


def _bev_corners(box: BoundingBox3D) -> list:
    """Counterclockwise BEV corners of the box footprint."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hx, hy = box.dx / 2, box.dy / 2
    corners = []
    for lx, ly in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
        corners.append((box.cx + lx * c - ly * s, box.cy + lx * s + ly * c))
    return corners


def _clip_halfplane(poly, p1, p2, tol=CLIP_TOL):
    # Keep the part of poly on the left of the directed edge p1 -> p2.
    ex, ey = p2[0] - p1[0], p2[1] - p1[1]
    out = []
    n = len(poly)
    for i in range(n):
        cur = poly[i]
        nxt = poly[(i + 1) % n]
        dc = ex * (cur[1] - p1[1]) - ey * (cur[0] - p1[0])
        dn = ex * (nxt[1] - p1[1]) - ey * (nxt[0] - p1[0])
        cur_in = dc >= -tol
        nxt_in = dn >= -tol
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = dc / (dc - dn)
            out.append((cur[0] + t * (nxt[0] - cur[0]),
                        cur[1] + t * (nxt[1] - cur[1])))
    return out


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


def bev_overlap_area(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Intersection area of the two yaw-rotated footprints in the xy-plane.

    Sutherland-Hodgman clipping of one rectangle against the half-planes of
    the other, then the shoelace area of the clipped polygon. The clip
    order is canonicalized so the result is exactly symmetric in the
    arguments.
    """
    ka = (a.cx, a.cy, a.dx, a.dy, a.yaw)
    kb = (b.cx, b.cy, b.dx, b.dy, b.yaw)
    if kb < ka:
        a, b = b, a
    poly = _bev_corners(a)
    clip = _bev_corners(b)
    for i in range(4):
        poly = _clip_halfplane(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def iou3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """3D intersection-over-union of two oriented boxes. Symmetric, in [0, 1]."""
    z_lo = max(a.cz - a.dz / 2, b.cz - b.dz / 2)
    z_hi = min(a.cz + a.dz / 2, b.cz + b.dz / 2)
    if z_hi <= z_lo:
        return 0.0
    inter = bev_overlap_area(a, b) * (z_hi - z_lo)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


def pairwise_iou3d(boxes_a, boxes_b) -> np.ndarray:
    """IoU matrix between two box sequences with a cheap distance prefilter.

    Pairs whose BEV circumcircles cannot touch (or whose z-intervals are
    disjoint) are zero without running the clipping path.
    """
    n, m = len(boxes_a), len(boxes_b)
    out = np.zeros((n, m))
    if n == 0 or m == 0:
        return out
    arr_a = boxes_to_array(boxes_a)
    arr_b = boxes_to_array(boxes_b)
    rad_a = 0.5 * np.hypot(arr_a[:, 3], arr_a[:, 4])
    rad_b = 0.5 * np.hypot(arr_b[:, 3], arr_b[:, 4])
    d2 = ((arr_a[:, None, 0] - arr_b[None, :, 0]) ** 2
          + (arr_a[:, None, 1] - arr_b[None, :, 1]) ** 2)
    reach = (rad_a[:, None] + rad_b[None, :]) ** 2
    z_gap = (np.abs(arr_a[:, None, 2] - arr_b[None, :, 2])
             - (arr_a[:, None, 5] + arr_b[None, :, 5]) / 2)
    cand = (d2 <= reach) & (z_gap < 0)
    for i, j in zip(*np.nonzero(cand)):
        out[i, j] = iou3d(boxes_a[i], boxes_b[j])
    return out


@njit(cache=True)
def _group_by_cell(ix, iy, nx, ny):
    # Counting sort of point indices by grid cell; returns CSR offsets and order.
    n = ix.size
    ncell = nx * ny
    offsets = np.zeros(ncell + 1, np.int64)
    for k in range(n):
        offsets[ix[k] * ny + iy[k] + 1] += 1
    for c in range(ncell):
        offsets[c + 1] += offsets[c]
    order = np.empty(n, np.int64)
    cursor = offsets[:-1].copy()
    for k in range(n):
        cell = ix[k] * ny + iy[k]
        order[cursor[cell]] = k
        cursor[cell] += 1
    return offsets, order


@njit(cache=True)
def _query_boxes_csr(px, py, pz, cell_offsets, order, x0, y0, cell, nx, ny,
                     boxes):
    # For every box, gather indices of contained points (closed test) from
    # the grid cells overlapping its BEV circumcircle bounding square.
    nb = boxes.shape[0]
    cap = max(px.size, 1024)
    idx = np.empty(cap, np.int64)
    out_offsets = np.zeros(nb + 1, np.int64)
    total = 0
    for b in range(nb):
        bcx, bcy, bcz = boxes[b, 0], boxes[b, 1], boxes[b, 2]
        hx, hy, hz = boxes[b, 3] * 0.5, boxes[b, 4] * 0.5, boxes[b, 5] * 0.5
        co = np.cos(boxes[b, 6])
        si = np.sin(boxes[b, 6])
        rad = np.hypot(hx, hy)
        gx0 = max(0, int(np.floor((bcx - rad - x0) / cell)))
        gx1 = min(nx - 1, int(np.floor((bcx + rad - x0) / cell)))
        gy0 = max(0, int(np.floor((bcy - rad - y0) / cell)))
        gy1 = min(ny - 1, int(np.floor((bcy + rad - y0) / cell)))
        for gx in range(gx0, gx1 + 1):
            base = gx * ny
            for gy in range(gy0, gy1 + 1):
                c0 = cell_offsets[base + gy]
                c1 = cell_offsets[base + gy + 1]
                for t in range(c0, c1):
                    k = order[t]
                    zz = pz[k] - bcz
                    if zz < -hz or zz > hz:
                        continue
                    xx = px[k] - bcx
                    yy = py[k] - bcy
                    xl = xx * co + yy * si
                    if xl < -hx or xl > hx:
                        continue
                    yl = -xx * si + yy * co
                    if yl < -hy or yl > hy:
                        continue
                    if total == cap:
                        cap *= 2
                        grown = np.empty(cap, np.int64)
                        grown[:total] = idx[:total]
                        idx = grown
                    idx[total] = k
                    total += 1
        out_offsets[b + 1] = total
    return idx[:total], out_offsets


@njit(cache=True)
def _box_point_stats(pts, chan_sel, point_idx, offsets, boxes):
    # Canonical per-box statistics over CSR point groups. chan_sel holds
    # point-array column indices; columns 0..2 are mapped to canonical
    # box-frame coordinates, the rest pass through.
    nb = boxes.shape[0]
    nch = chan_sel.size
    stats = np.zeros((nb, 4, nch))
    counts = np.zeros(nb, np.int64)
    acc = np.zeros(nch)
    acc2 = np.zeros(nch)
    mn = np.zeros(nch)
    mx = np.zeros(nch)
    for b in range(nb):
        lo, hi = offsets[b], offsets[b + 1]
        m = hi - lo
        counts[b] = m
        if m == 0:
            continue
        bcx, bcy, bcz = boxes[b, 0], boxes[b, 1], boxes[b, 2]
        inv_dx = 1.0 / boxes[b, 3]
        inv_dy = 1.0 / boxes[b, 4]
        inv_dz = 1.0 / boxes[b, 5]
        co = np.cos(boxes[b, 6])
        si = np.sin(boxes[b, 6])
        for j in range(nch):
            acc[j] = 0.0
            acc2[j] = 0.0
            mn[j] = np.inf
            mx[j] = -np.inf
        for t in range(lo, hi):
            k = point_idx[t]
            xx = pts[k, 0] - bcx
            yy = pts[k, 1] - bcy
            xl = (xx * co + yy * si) * inv_dx
            yl = (-xx * si + yy * co) * inv_dy
            zl = (pts[k, 2] - bcz) * inv_dz
            for j in range(nch):
                ci = chan_sel[j]
                if ci == 0:
                    val = xl
                elif ci == 1:
                    val = yl
                elif ci == 2:
                    val = zl
                else:
                    val = pts[k, ci]
                acc[j] += val
                acc2[j] += val * val
                if val < mn[j]:
                    mn[j] = val
                if val > mx[j]:
                    mx[j] = val
        for j in range(nch):
            mean = acc[j] / m
            var = acc2[j] / m - mean * mean
            stats[b, 0, j] = mean
            stats[b, 1, j] = np.sqrt(var) if var > 0.0 else 0.0
            stats[b, 2, j] = mn[j]
            stats[b, 3, j] = mx[j]
    return stats, counts


class PointGrid:
    """Uniform 2D grid over (x, y) for batched in-box point queries.

    Built once per frame and immutable afterwards, so it can be shared
    across reader threads. Query results are identical to per-box
    :func:`points_in_box` calls.
    """

    def __init__(self, points: np.ndarray, cell_size: float = 5.0):
        pts = np.ascontiguousarray(np.asarray(points), dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("points must be a 2D (N, C) array")
        self.points = pts
        n = pts.shape[0]
        if n == 0:
            self._empty = True
            return
        self._empty = False
        x, y = pts[:, 0], pts[:, 1]
        self._x0 = float(x.min())
        self._y0 = float(y.min())
        span = max(x.max() - self._x0, y.max() - self._y0, 1.0)
        # Keep the cell table bounded for pathological extents.
        self._cell = max(float(cell_size), span / 2048.0)
        ix = np.floor((x - self._x0) / self._cell).astype(np.int64)
        iy = np.floor((y - self._y0) / self._cell).astype(np.int64)
        self._nx = int(ix.max()) + 1
        self._ny = int(iy.max()) + 1
        self._cell_offsets, self._order = _group_by_cell(
            ix, iy, self._nx, self._ny)

    def query_boxes(self, boxes_arr: np.ndarray):
        """CSR point-index groups for each box in an (B, 7) array.

        Returns (point_idx, offsets) where points of box b are
        ``point_idx[offsets[b]:offsets[b + 1]]``.
        """
        boxes_arr = np.ascontiguousarray(boxes_arr, dtype=np.float64)
        nb = boxes_arr.shape[0]
        if self._empty or nb == 0:
            return np.zeros(0, np.int64), np.zeros(nb + 1, np.int64)
        return _query_boxes_csr(
            self.points[:, 0], self.points[:, 1], self.points[:, 2],
            self._cell_offsets, self._order, self._x0, self._y0,
            self._cell, self._nx, self._ny, boxes_arr)

    def box_stats(self, boxes_arr: np.ndarray, chan_sel: np.ndarray,
                  point_idx: np.ndarray, offsets: np.ndarray):
        """Canonical per-box point statistics for precomputed CSR groups.

        Returns (stats, counts) with stats of shape (B, 4, C) ordered
        mean, std, min, max.
        """
        boxes_arr = np.ascontiguousarray(boxes_arr, dtype=np.float64)
        if self._empty or boxes_arr.shape[0] == 0:
            nb = boxes_arr.shape[0]
            return (np.zeros((nb, 4, chan_sel.size)),
                    np.zeros(nb, np.int64))
        return _box_point_stats(self.points, chan_sel, point_idx, offsets,
                                boxes_arr)
