"""Detection metrics: PR curves, AP / AP@R40, heading-weighted APH,
oracle-gap analysis and conditional-precision breakdowns.

Detections are pooled over frames and ranked by score (ties broken by
frame id, then input index); matching is greedy one-to-one per frame at
the class IoU threshold. All metrics depend on the score ordering only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_iou3d, points_in_box, viewing_angle, wrap_angle
from .supervision import default_thresholds

R40_SAMPLES = 40


def heading_accuracy(delta_yaw: float) -> float:
    """Heading weight of a true positive: 1 at perfect heading, 0 at pi error."""
    return 1.0 - abs(float(wrap_angle(delta_yaw))) / math.pi


@dataclass(frozen=True)
class PrPoint:
    """One cumulative PR-curve sample at a score threshold."""

    threshold: float
    precision: float
    recall: float
    heading_precision: float


@dataclass(frozen=True)
class _RankedDet:
    frame_id: str
    index: int
    score: float
    tp: bool
    heading: float  # heading weight; 0 for false positives


def _ranked_matches(dets_by_frame, gts_by_frame, class_id, iou_thr):
    """Pooled score-ranked detections of one class with greedy TP flags."""
    pooled = []
    for frame_id in dets_by_frame:
        for idx, det in enumerate(dets_by_frame[frame_id]):
            if det.class_id == class_id:
                pooled.append((frame_id, idx, det))
    pooled.sort(key=lambda t: (-t[2].score, t[0], t[1]))

    gts = {fid: [g for g in gts_by_frame.get(fid, ())
                 if g.class_id == class_id]
           for fid in set(dets_by_frame) | set(gts_by_frame)}
    n_gts = sum(len(v) for v in gts.values())

    iou_cache = {}
    taken = {fid: np.zeros(len(g), dtype=bool) for fid, g in gts.items()}
    ranked = []
    for frame_id, idx, det in pooled:
        frame_gts = gts.get(frame_id, [])
        tp = False
        heading = 0.0
        if frame_gts:
            if frame_id not in iou_cache:
                orig = [k for k, d in enumerate(dets_by_frame[frame_id])
                        if d.class_id == class_id]
                iou_cache[frame_id] = (
                    pairwise_iou3d([dets_by_frame[frame_id][k].box
                                    for k in orig],
                                   [g.box for g in frame_gts]),
                    {k: row for row, k in enumerate(orig)})
            iou, row_of = iou_cache[frame_id]
            row = iou[row_of[idx]]
            best_j, best_iou = -1, 0.0
            for j in range(len(frame_gts)):
                if taken[frame_id][j]:
                    continue
                if row[j] >= iou_thr and row[j] > best_iou:
                    best_j, best_iou = j, row[j]
            if best_j >= 0:
                taken[frame_id][best_j] = True
                tp = True
                heading = heading_accuracy(det.box.yaw
                                           - frame_gts[best_j].box.yaw)
        ranked.append(_RankedDet(frame_id, idx, det.score, tp, heading))
    return ranked, n_gts


def _curve_from_ranked(ranked, n_gts):
    points = []
    tp_cum = 0
    hp_cum = 0.0
    for rank, det in enumerate(ranked, start=1):
        if det.tp:
            tp_cum += 1
            hp_cum += det.heading
        points.append(PrPoint(det.score, tp_cum / rank, tp_cum / n_gts,
                              hp_cum / rank))
    return points


def pr_curve(dets_by_frame, gts_by_frame, class_id: int,
             iou_thr: float) -> list:
    """Cumulative precision/recall points for one class.

    Args:
        dets_by_frame: mapping frame id -> list of Detection.
        gts_by_frame: mapping frame id -> list of GroundTruth.
        class_id: class to evaluate.
        iou_thr: 3D IoU threshold for a true positive.

    Returns:
        List of PrPoint in rank order. Empty when the class has no ground
        truth (recall is undefined; callers report AP 0 with a warning).
    """
    ranked, n_gts = _ranked_matches(dets_by_frame, gts_by_frame, class_id,
                                    iou_thr)
    if n_gts == 0:
        return []
    return _curve_from_ranked(ranked, n_gts)


def average_precision(curve, mode: str = "continuous",
                      heading: bool = False) -> float:
    """Area under the precision envelope of a PR curve.

    ``continuous`` integrates the envelope over the achieved recalls;
    ``r40`` averages the interpolated envelope at 40 evenly spaced recall
    samples, with precision 0 at samples beyond the highest recall.
    """
    if mode not in ("continuous", "r40"):
        raise ValueError(f"unknown AP mode {mode!r}")
    if not curve:
        return 0.0
    recalls = [p.recall for p in curve]
    precs = [p.heading_precision if heading else p.precision for p in curve]
    env = precs[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    if mode == "continuous":
        ap = 0.0
        prev_r = 0.0
        for r, p in zip(recalls, env):
            ap += (r - prev_r) * p
            prev_r = r
        return ap
    total = 0.0
    for k in range(1, R40_SAMPLES + 1):
        target = k / R40_SAMPLES
        value = 0.0
        for r, p in zip(recalls, env):
            if r >= target:
                value = p
                break
        total += value
    return total / R40_SAMPLES


def oracle_gap(dets_by_frame, gts_by_frame, class_id: int, iou_thr: float):
    """AP headroom from perfectly reclassifying the detections.

    Matched true positives are re-scored to 1 and false positives to 0;
    within the score-1 group the baseline ranking order is kept so the
    matched set is preserved and the gap is never negative.

    Returns (baseline_ap, oracle_ap), both continuous-mode.
    """
    ranked, n_gts = _ranked_matches(dets_by_frame, gts_by_frame, class_id,
                                    iou_thr)
    if n_gts == 0:
        return 0.0, 0.0
    baseline = average_precision(_curve_from_ranked(ranked, n_gts))
    oracle_ranked = sorted(ranked, key=lambda d: not d.tp)
    oracle_ranked = [
        _RankedDet(d.frame_id, d.index, 1.0 if d.tp else 0.0, d.tp, d.heading)
        for d in oracle_ranked]
    oracle = average_precision(_curve_from_ranked(oracle_ranked, n_gts))
    return baseline, oracle


@dataclass
class ClassEval:
    class_id: int
    name: str
    n_gts: int
    ap: float
    aph: float
    ap_r40: float
    oracle_ap: float
    curve: list
    no_ground_truth: bool = False

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "name": self.name,
                "n_gts": self.n_gts, "ap": self.ap, "aph": self.aph,
                "ap_r40": self.ap_r40, "oracle_ap": self.oracle_ap,
                "no_ground_truth": self.no_ground_truth}


@dataclass
class EvalReport:
    classes: list
    iou_thresholds: tuple
    map: float
    maph: float
    map_r40: float

    def to_dict(self) -> dict:
        return {"classes": [c.to_dict() for c in self.classes],
                "iou_thresholds": list(self.iou_thresholds),
                "map": self.map, "maph": self.maph,
                "map_r40": self.map_r40}

    def format_table(self) -> str:
        """Human-readable summary with AP values in percentage points."""
        rows = [f"{'class':<12} {'n_gt':>6} {'AP':>8} {'APH':>8} "
                f"{'AP@R40':>8} {'oracleAP':>9} {'IoU':>5}"]
        rows.append("-" * len(rows[0]))
        for c, thr in zip(self.classes, self.iou_thresholds):
            warn = "  (no ground truth)" if c.no_ground_truth else ""
            rows.append(f"{c.name:<12} {c.n_gts:>6d} {100 * c.ap:>8.2f} "
                        f"{100 * c.aph:>8.2f} {100 * c.ap_r40:>8.2f} "
                        f"{100 * c.oracle_ap:>9.2f} {thr:>5.2f}{warn}")
        rows.append("-" * len(rows[0]))
        rows.append(f"{'mAP':<12} {100 * self.map:>24.2f}")
        rows.append(f"{'mAPH':<12} {100 * self.maph:>24.2f}")
        rows.append(f"{'mAP@R40':<12} {100 * self.map_r40:>24.2f}")
        return "\n".join(rows)


def evaluate(dets_by_frame, gts_by_frame, class_names,
             iou_thresholds=None) -> EvalReport:
    """Full per-class evaluation report.

    Classes with no ground truth get AP 0 and a warning flag; the means
    run over all configured classes.
    """
    class_names = list(class_names)
    if iou_thresholds is None:
        iou_thresholds = default_thresholds(len(class_names))
    iou_thresholds = tuple(float(t) for t in iou_thresholds)
    classes = []
    for cid, name in enumerate(class_names):
        ranked, n_gts = _ranked_matches(dets_by_frame, gts_by_frame, cid,
                                        iou_thresholds[cid])
        if n_gts == 0:
            classes.append(ClassEval(cid, name, 0, 0.0, 0.0, 0.0, 0.0, [],
                                     no_ground_truth=True))
            continue
        curve = _curve_from_ranked(ranked, n_gts)
        _, oracle = oracle_gap(dets_by_frame, gts_by_frame, cid,
                               iou_thresholds[cid])
        classes.append(ClassEval(
            cid, name, n_gts,
            ap=average_precision(curve),
            aph=average_precision(curve, heading=True),
            ap_r40=average_precision(curve, mode="r40"),
            oracle_ap=oracle, curve=curve))
    n = len(classes)
    return EvalReport(classes, iou_thresholds,
                      map=sum(c.ap for c in classes) / n,
                      maph=sum(c.aph for c in classes) / n,
                      map_r40=sum(c.ap_r40 for c in classes) / n)


def curve_csv_rows(curve) -> list:
    """Plot-ready rows: threshold, precision, recall, heading_precision."""
    rows = ["threshold,precision,recall,heading_precision"]
    for p in curve:
        rows.append(f"{p.threshold:.9g},{p.precision:.9g},{p.recall:.9g},"
                    f"{p.heading_precision:.9g}")
    return rows


def filter_by_point_count(frames, min_points=None, max_points=None,
                          iou_thresholds=None, class_count=None):
    """Point-count difficulty filter over ground truth.

    Ground-truth objects whose in-box point count falls outside
    [min_points, max_points] are excluded; detections whose best match is
    an excluded object are ignored rather than counted as false positives.
    This stands in for dataset-specific difficulty partitions.

    Returns (dets_by_frame, gts_by_frame) ready for :func:`evaluate`.
    """
    if class_count is None:
        class_count = 1 + max(
            [d.class_id for f in frames for d in f.detections]
            + [g.class_id for f in frames for g in (f.ground_truth or ())]
            + [0])
    if iou_thresholds is None:
        iou_thresholds = default_thresholds(class_count)
    lo = 0 if min_points is None else int(min_points)
    hi = math.inf if max_points is None else int(max_points)

    dets_by_frame, gts_by_frame = {}, {}
    for frame in frames:
        gts = list(frame.ground_truth or ())
        counts = [points_in_box(frame.points, g.box).shape[0] for g in gts]
        keep_gt = [lo <= c <= hi for c in counts]
        iou = pairwise_iou3d([d.box for d in frame.detections],
                             [g.box for g in gts])
        taken = np.zeros(len(gts), dtype=bool)
        order = sorted(range(len(frame.detections)),
                       key=lambda i: (-frame.detections[i].score, i))
        keep_det = [True] * len(frame.detections)
        for i in order:
            det = frame.detections[i]
            best_j, best_iou = -1, 0.0
            for j, gt in enumerate(gts):
                if taken[j] or gt.class_id != det.class_id:
                    continue
                if iou[i, j] >= iou_thresholds[det.class_id] \
                        and iou[i, j] > best_iou:
                    best_j, best_iou = j, iou[i, j]
            if best_j >= 0:
                taken[best_j] = True
                if not keep_gt[best_j]:
                    keep_det[i] = False
        dets_by_frame[frame.frame_id] = [
            d for i, d in enumerate(frame.detections) if keep_det[i]]
        gts_by_frame[frame.frame_id] = [
            g for j, g in enumerate(gts) if keep_gt[j]]
    return dets_by_frame, gts_by_frame


# Geometric property extractors for conditional precision. Each maps
# (detection, frame) to a real number.

def conditioner_length(det, frame) -> float:
    return det.box.dx


def conditioner_viewing_angle(det, frame) -> float:
    """Viewing angle in degrees; 0 is the rear view."""
    return math.degrees(viewing_angle(det.box))


def conditioner_point_count(det, frame) -> float:
    return float(points_in_box(frame.points, det.box).shape[0])


def conditioner_range(det, frame) -> float:
    return float(math.hypot(det.box.cx, det.box.cy))


CONDITIONERS = {
    "length": conditioner_length,
    "viewing-angle": conditioner_viewing_angle,
    "point-count": conditioner_point_count,
    "range": conditioner_range,
}


@dataclass
class ConditionalPrecision:
    """Per-bin precision at a fixed score threshold."""

    bin_edges: np.ndarray
    counts: np.ndarray
    tp_counts: np.ndarray
    precision: list  # float per bin, None where the bin is empty
    score_threshold: float

    def csv_rows(self) -> list:
        rows = ["bin_low,bin_high,count,tp_count,precision"]
        for i in range(self.counts.size):
            p = self.precision[i]
            rows.append(f"{self.bin_edges[i]:.9g},{self.bin_edges[i + 1]:.9g},"
                        f"{self.counts[i]},{self.tp_counts[i]},"
                        f"{'' if p is None else format(p, '.9g')}")
        return rows


def conditional_precision(frames, conditioner, bins, *,
                          iou_thresholds=None, class_id=None,
                          score_threshold: float = 0.0,
                          class_count: int | None = None) -> ConditionalPrecision:
    """Precision as a function of a geometric property of the detections.

    Detections at or above the score threshold are matched greedily per
    frame and class, then bucketed by the conditioner value. Empty bins
    report precision as absent, not 0.

    Args:
        frames: sequence of Frame carrying detections and ground truth.
        conditioner: callable (detection, frame) -> float, or a name from
            CONDITIONERS.
        bins: number of equal-width bins, or explicit bin edges.
        iou_thresholds: per-class TP thresholds (defaults per class).
        class_id: restrict to one class (all classes when None).
        score_threshold: detections below it are ignored.
    """
    if isinstance(conditioner, str):
        conditioner = CONDITIONERS[conditioner]
    if class_count is None:
        class_count = 1 + max(
            [d.class_id for f in frames for d in f.detections]
            + [g.class_id for f in frames for g in (f.ground_truth or ())]
            + [0])
    if iou_thresholds is None:
        iou_thresholds = default_thresholds(class_count)

    values, tps = [], []
    for frame in frames:
        kept = [(i, d) for i, d in enumerate(frame.detections)
                if d.score >= score_threshold
                and (class_id is None or d.class_id == class_id)]
        gts = list(frame.ground_truth or ())
        iou = pairwise_iou3d([d.box for _, d in kept], [g.box for g in gts])
        taken = np.zeros(len(gts), dtype=bool)
        order = sorted(range(len(kept)), key=lambda k: (-kept[k][1].score, k))
        tp_flags = [False] * len(kept)
        for k in order:
            det = kept[k][1]
            best_j, best_iou = -1, 0.0
            for j, gt in enumerate(gts):
                if taken[j] or gt.class_id != det.class_id:
                    continue
                if iou[k, j] >= iou_thresholds[det.class_id] \
                        and iou[k, j] > best_iou:
                    best_j, best_iou = j, iou[k, j]
            if best_j >= 0:
                taken[best_j] = True
                tp_flags[k] = True
        for k, (_, det) in enumerate(kept):
            values.append(conditioner(det, frame))
            tps.append(tp_flags[k])

    values = np.asarray(values, dtype=np.float64)
    tps = np.asarray(tps, dtype=bool)
    if np.isscalar(bins) or isinstance(bins, int):
        if values.size == 0:
            edges = np.linspace(0.0, 1.0, int(bins) + 1)
        else:
            lo, hi = values.min(), values.max()
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=np.float64)
    nbin = edges.size - 1
    which = np.clip(np.digitize(values, edges) - 1, 0, nbin - 1)
    counts = np.zeros(nbin, dtype=np.int64)
    tp_counts = np.zeros(nbin, dtype=np.int64)
    for b, tp in zip(which, tps):
        counts[b] += 1
        tp_counts[b] += int(tp)
    precision = [tp_counts[i] / counts[i] if counts[i] > 0 else None
                 for i in range(nbin)]
    return ConditionalPrecision(edges, counts, tp_counts, precision,
                                score_threshold)
