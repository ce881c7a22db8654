"""Independent straight-line reference implementations used as test oracles.

These deliberately avoid the production code paths: Monte-Carlo overlap
instead of polygon clipping, exhaustive matching enumeration instead of
greedy assignment, naive loops instead of vectorized curves.
"""

import itertools
import math

import numpy as np


def mc_bev_overlap(box_a, box_b, n_samples, rng):
    """Rejection-sampling estimate of the BEV intersection area."""
    def corners(box):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        pts = []
        for lx, ly in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            x = box.cx + lx * box.dx / 2 * c - ly * box.dy / 2 * s
            y = box.cy + lx * box.dx / 2 * s + ly * box.dy / 2 * c
            pts.append((x, y))
        return pts

    allc = corners(box_a) + corners(box_b)
    xs = [p[0] for p in allc]
    ys = [p[1] for p in allc]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    px = rng.uniform(x0, x1, n_samples)
    py = rng.uniform(y0, y1, n_samples)

    def inside(box):
        dx = px - box.cx
        dy = py - box.cy
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        xl = dx * c + dy * s
        yl = -dx * s + dy * c
        return (np.abs(xl) <= box.dx / 2) & (np.abs(yl) <= box.dy / 2)

    frac = np.mean(inside(box_a) & inside(box_b))
    return frac * (x1 - x0) * (y1 - y0)


def max_tp_matching(iou, det_classes, gt_classes, det_thr):
    """Maximum achievable TP count over all injective det-to-gt matchings."""
    n, m = iou.shape
    edges = [[j for j in range(m)
              if det_classes[i] == gt_classes[j] and iou[i, j] >= det_thr[i]]
             for i in range(n)]

    best = 0
    used = [False] * m

    def rec(i, count):
        nonlocal best
        if count + (n - i) <= best:
            return
        if i == n:
            best = max(best, count)
            return
        rec(i + 1, count)
        for j in edges[i]:
            if not used[j]:
                used[j] = True
                rec(i + 1, count + 1)
                used[j] = False

    rec(0, 0)
    return best


def ref_ranked_matches(dets_by_frame, gts_by_frame, class_id, iou_thr,
                       iou_fn):
    """Naive re-implementation of pooled greedy matching."""
    pooled = []
    for fid in sorted(set(dets_by_frame) | set(gts_by_frame)):
        for idx, det in enumerate(dets_by_frame.get(fid, [])):
            if det.class_id == class_id:
                pooled.append((fid, idx, det))
    pooled.sort(key=lambda t: (-t[2].score, t[0], t[1]))
    gts = {fid: [g for g in gts_by_frame.get(fid, [])
                 if g.class_id == class_id]
           for fid in set(dets_by_frame) | set(gts_by_frame)}
    n_gts = sum(len(v) for v in gts.values())
    used = {fid: [False] * len(v) for fid, v in gts.items()}
    flags = []
    for fid, idx, det in pooled:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts.get(fid, [])):
            if used[fid][j]:
                continue
            val = iou_fn(det.box, gt.box)
            if val >= iou_thr and val > best_iou:
                best_j, best_iou = j, val
        if best_j >= 0:
            used[fid][best_j] = True
            flags.append((det.score, True))
        else:
            flags.append((det.score, False))
    return flags, n_gts


def ref_curve(flags, n_gts):
    """Cumulative precision/recall from (score, tp) flags in rank order."""
    pts = []
    tp = 0
    for rank, (score, is_tp) in enumerate(flags, start=1):
        if is_tp:
            tp += 1
        pts.append((tp / rank, tp / n_gts))
    return pts


def ref_ap_continuous(pts):
    precs = [p for p, _ in pts]
    recalls = [r for _, r in pts]
    env = precs[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev = 0.0
    for r, p in zip(recalls, env):
        ap += (r - prev) * p
        prev = r
    return ap


def ref_ap_r40(pts):
    precs = [p for p, _ in pts]
    recalls = [r for _, r in pts]
    env = precs[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    total = 0.0
    for k in range(1, 41):
        target = k / 40
        value = 0.0
        for r, p in zip(recalls, env):
            if r >= target:
                value = p
                break
        total += value
    return total / 40


def random_box(rng, center_scale=20.0, dim_lo=0.5, dim_hi=6.0):
    from gace import BoundingBox3D
    return BoundingBox3D(
        rng.uniform(-center_scale, center_scale),
        rng.uniform(-center_scale, center_scale),
        rng.uniform(-2.0, 2.0),
        rng.uniform(dim_lo, dim_hi), rng.uniform(dim_lo, dim_hi),
        rng.uniform(dim_lo, dim_hi), rng.uniform(-np.pi, np.pi))


def fd_gradients(model, inputs, u, v, loss_cfg, h=1e-4, param_index=None,
                 flat_indices=None):
    """Central finite differences of the frame loss w.r.t. parameters.

    Perturbs every entry of every parameter array (or only the selected
    flat indices of one array) and re-runs the forward pass.
    """
    from gace.net import gace_forward, model_params, total_loss

    def loss():
        s_hat, v_hat = gace_forward(model, inputs)
        return total_loss(s_hat, v_hat, u, v, loss_cfg)[0]

    params = model_params(model)
    targets = range(len(params)) if param_index is None else [param_index]
    out = []
    for pi in targets:
        flat = params[pi].reshape(-1)
        idxs = list(range(flat.size)) if flat_indices is None \
            else list(flat_indices)
        g = np.zeros(len(idxs))
        for k, j in enumerate(idxs):
            orig = flat[j]
            flat[j] = orig + h
            up = loss()
            flat[j] = orig - h
            down = loss()
            flat[j] = orig
            g[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_error(a, b, floor=1e-3):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def random_frame_inputs(rng, n_dets, norm_cfg, max_neighbors=10):
    """Synthetic FrameInputs with controlled neighbor structure."""
    from gace.net import FrameInputs

    d = norm_cfg.instance_dim
    g = norm_cfg.neighbor_geo_dim
    x = rng.uniform(-1, 1, (n_dets, d))
    subj, nbr = [], []
    offsets = np.zeros(n_dets + 1, dtype=np.int64)
    for i in range(n_dets):
        k = int(rng.integers(0, min(max_neighbors, n_dets - 1) + 1)) \
            if n_dets > 1 else 0
        choices = np.array([j for j in range(n_dets) if j != i])
        js = np.sort(rng.choice(choices, size=k, replace=False)) if k else \
            np.zeros(0, dtype=np.int64)
        subj.append(np.full(k, i, dtype=np.int64))
        nbr.append(js.astype(np.int64))
        offsets[i + 1] = offsets[i] + k
    subject = np.concatenate(subj) if subj else np.zeros(0, np.int64)
    neighbor = np.concatenate(nbr) if nbr else np.zeros(0, np.int64)
    geo = rng.uniform(-1, 1, (subject.size, g))
    geo[:, 0] = rng.uniform(0, 1, subject.size)
    return FrameInputs(x, subject, neighbor, offsets, geo)
