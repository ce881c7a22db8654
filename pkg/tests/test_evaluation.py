import math

import numpy as np
import pytest

from gace import (BoundingBox3D, Detection, Frame, GroundTruth,
                  average_precision, conditional_precision, evaluate, iou3d,
                  oracle_gap, pr_curve)
from gace.evaluation import (PrPoint, curve_csv_rows, filter_by_point_count,
                             heading_accuracy)

from _oracles import (ref_ap_continuous, ref_ap_r40, ref_curve,
                      ref_ranked_matches)


def box(cx, cy, yaw=0.0, dx=4.0, dy=2.0, dz=1.6, cz=0.0):
    return BoundingBox3D(cx, cy, cz, dx, dy, dz, yaw)


def det(cx, cy, score, yaw=0.0, class_id=0, **kw):
    return Detection(box(cx, cy, yaw, **kw), class_id, score)


def gt(cx, cy, yaw=0.0, class_id=0, **kw):
    return GroundTruth(box(cx, cy, yaw, **kw), class_id)


def test_heading_accuracy():
    assert heading_accuracy(0.0) == 1.0
    assert heading_accuracy(math.pi) == pytest.approx(0.0)
    assert heading_accuracy(-math.pi) == pytest.approx(0.0)
    assert heading_accuracy(math.pi / 2) == pytest.approx(0.5)
    assert heading_accuracy(2 * math.pi) == pytest.approx(1.0)


def test_pr_curve_single_match():
    dets = {"f0": [det(0, 0, 0.9)]}
    gts = {"f0": [gt(0, 0)]}
    curve = pr_curve(dets, gts, 0, 0.7)
    assert len(curve) == 1
    p = curve[0]
    assert (p.precision, p.recall, p.heading_precision) == (1.0, 1.0, 1.0)
    assert p.threshold == 0.9


def test_pr_curve_heading_weights():
    dets = {"f0": [det(0, 0, 0.9, yaw=math.pi)]}
    gts = {"f0": [gt(0, 0, yaw=0.0)]}
    # opposite heading: still a TP but contributes 0 heading precision
    curve = pr_curve(dets, gts, 0, 0.5)
    assert curve[0].precision == 1.0
    assert curve[0].heading_precision == pytest.approx(0.0)

    dets = {"f0": [Detection(box(0, 0, math.pi / 2, dx=2.0, dy=2.0), 0, 0.9)]}
    gts = {"f0": [GroundTruth(box(0, 0, 0.0, dx=2.0, dy=2.0), 0)]}
    curve = pr_curve(dets, gts, 0, 0.5)
    assert curve[0].precision == 1.0
    assert curve[0].heading_precision == pytest.approx(0.5)


def test_pr_curve_no_ground_truth():
    curve = pr_curve({"f0": [det(0, 0, 0.5)]}, {"f0": []}, 0, 0.7)
    assert curve == []
    assert average_precision(curve) == 0.0


def test_ap_perfect_detector():
    dets = {"f0": [det(0, 0, 0.9), det(20, 0, 0.8)],
            "f1": [det(5, 5, 0.7)]}
    gts = {"f0": [gt(0, 0), gt(20, 0)], "f1": [gt(5, 5)]}
    curve = pr_curve(dets, gts, 0, 0.7)
    assert average_precision(curve) == pytest.approx(1.0)
    assert average_precision(curve, mode="r40") == pytest.approx(1.0)
    assert average_precision(curve, heading=True) == pytest.approx(1.0)


def test_ap_r40_tp_below_fp():
    dets = {"f0": [det(0, 0, 0.5), det(50, 0, 0.9)]}  # FP outranks the TP
    gts = {"f0": [gt(0, 0)]}
    curve = pr_curve(dets, gts, 0, 0.7)
    assert average_precision(curve, mode="r40") == pytest.approx(0.5)
    assert average_precision(curve) == pytest.approx(0.5)


def test_ap_mode_validation():
    with pytest.raises(ValueError):
        average_precision([PrPoint(0.5, 1, 1, 1)], mode="r11")


def _random_eval_instance(rng, max_each=6, n_frames=None):
    frames = n_frames or int(rng.integers(1, 11))
    dets_by_frame, gts_by_frame = {}, {}
    for f in range(frames):
        fid = f"{f:03d}"
        gts = []
        for _ in range(rng.integers(0, max_each + 1)):
            for _attempt in range(20):
                cand = gt(rng.uniform(-30, 30), rng.uniform(-30, 30),
                          yaw=rng.uniform(-math.pi, math.pi),
                          class_id=int(rng.integers(0, 2)))
                if all(iou3d(cand.box, g.box) == 0.0 for g in gts):
                    gts.append(cand)
                    break
        dets = []
        for _ in range(rng.integers(0, max_each + 1)):
            if gts and rng.random() < 0.7:
                src = gts[rng.integers(0, len(gts))].box
                cid = gts[-1].class_id if rng.random() < 0.2 else \
                    [g for g in gts if g.box is src][0].class_id
                b = BoundingBox3D(src.cx + rng.normal(0, 0.5),
                                  src.cy + rng.normal(0, 0.5), src.cz,
                                  src.dx, src.dy, src.dz,
                                  src.yaw + rng.normal(0, 0.3))
            else:
                b = box(rng.uniform(-30, 30), rng.uniform(-30, 30),
                        rng.uniform(-math.pi, math.pi))
                cid = int(rng.integers(0, 2))
            dets.append(Detection(b, cid, float(rng.uniform(0.05, 0.95))))
        dets_by_frame[fid] = dets
        gts_by_frame[fid] = gts
    return dets_by_frame, gts_by_frame


def test_matching_and_ap_match_bruteforce_reference():
    rng = np.random.default_rng(20)
    for trial in range(300):
        dets_by_frame, gts_by_frame = _random_eval_instance(rng)
        for cid, thr in ((0, 0.7), (1, 0.5)):
            flags, n_gts = ref_ranked_matches(dets_by_frame, gts_by_frame,
                                              cid, thr, iou3d)
            curve = pr_curve(dets_by_frame, gts_by_frame, cid, thr)
            if n_gts == 0:
                assert curve == []
                continue
            ref_pts = ref_curve(flags, n_gts)
            assert len(curve) == len(ref_pts)
            for p, (rp, rr) in zip(curve, ref_pts):
                assert p.precision == rp  # exact
                assert p.recall == rr
            assert average_precision(curve) == ref_ap_continuous(ref_pts)
            assert average_precision(curve, mode="r40") == ref_ap_r40(ref_pts)


def test_ap_invariant_under_monotone_score_transforms():
    rng = np.random.default_rng(21)
    transforms = [lambda s: 0.5 * s, lambda s: s ** 3,
                  lambda s: 1 / (1 + np.exp(-7 * (s - 0.4))),
                  lambda s: 0.05 + 0.9 * s]
    for trial in range(100):
        dets_by_frame, gts_by_frame = _random_eval_instance(rng)
        base = {cid: (pr_curve(dets_by_frame, gts_by_frame, cid, thr))
                for cid, thr in ((0, 0.7), (1, 0.5))}
        tf = transforms[trial % len(transforms)]
        warped = {fid: [Detection(d.box, d.class_id, float(tf(d.score)))
                        for d in dets]
                  for fid, dets in dets_by_frame.items()}
        for cid, thr in ((0, 0.7), (1, 0.5)):
            got = pr_curve(warped, gts_by_frame, cid, thr)
            assert average_precision(got) == average_precision(base[cid])
            assert average_precision(got, mode="r40") == \
                average_precision(base[cid], mode="r40")
            assert average_precision(got, heading=True) == \
                average_precision(base[cid], heading=True)


def test_aph_never_exceeds_ap():
    rng = np.random.default_rng(22)
    for _ in range(100):
        dets_by_frame, gts_by_frame = _random_eval_instance(rng)
        for cid, thr in ((0, 0.7), (1, 0.5)):
            curve = pr_curve(dets_by_frame, gts_by_frame, cid, thr)
            assert average_precision(curve, heading=True) <= \
                average_precision(curve) + 1e-12


def test_aph_equals_ap_iff_perfect_headings():
    dets = {"f0": [det(0, 0, 0.9, yaw=0.3), det(20, 0, 0.8, yaw=-1.0)]}
    gts = {"f0": [gt(0, 0, yaw=0.3), gt(20, 0, yaw=-1.0)]}
    curve = pr_curve(dets, gts, 0, 0.7)
    assert average_precision(curve, heading=True) == average_precision(curve)

    dets_bad = {"f0": [det(0, 0, 0.9, yaw=0.5), det(20, 0, 0.8, yaw=-1.0)]}
    curve = pr_curve(dets_bad, gts, 0, 0.5)
    assert average_precision(curve, heading=True) < average_precision(curve)


def test_continuous_and_r40_close_at_full_recall():
    rng = np.random.default_rng(23)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        flags = [(float(s), True) for s in np.sort(rng.uniform(0, 1, n))[::-1]]
        n_fp = int(rng.integers(0, 20))
        fps = [(float(s), False) for s in rng.uniform(0, 1, n_fp)]
        ranked = sorted(flags + fps, key=lambda t: -t[0])
        pts = ref_curve(ranked, n)
        curve = [PrPoint(s, p, r, p) for (s, _), (p, r) in zip(ranked, pts)]
        cont = average_precision(curve)
        r40 = average_precision(curve, mode="r40")
        assert abs(cont - r40) <= 1 / 40 + 1e-12


def test_oracle_gap_perfect_ranking():
    dets = {"f0": [det(0, 0, 0.9), det(50, 0, 0.2)]}  # TP above FP already
    gts = {"f0": [gt(0, 0)]}
    base, oracle = oracle_gap(dets, gts, 0, 0.7)
    assert base == pytest.approx(1.0)
    assert oracle == pytest.approx(1.0)


def test_oracle_gap_worst_ranking():
    dets = {"f0": [det(0, 0, 0.1), det(50, 0, 0.9), det(60, 0, 0.8)]}
    gts = {"f0": [gt(0, 0)]}
    base, oracle = oracle_gap(dets, gts, 0, 0.7)
    assert oracle == pytest.approx(1.0)  # the one TP tops the oracle ranking
    assert base == pytest.approx(1 / 3)


def test_oracle_gap_nonnegative_randomized():
    rng = np.random.default_rng(24)
    for _ in range(200):
        dets_by_frame, gts_by_frame = _random_eval_instance(rng)
        for cid, thr in ((0, 0.7), (1, 0.5)):
            base, oracle = oracle_gap(dets_by_frame, gts_by_frame, cid, thr)
            assert oracle >= base - 1e-12


def test_evaluate_report():
    dets = {"f0": [det(0, 0, 0.9), det(20, 0, 0.4, class_id=1, dx=0.8,
                                       dy=0.8, dz=1.7)]}
    gts = {"f0": [gt(0, 0), gt(20, 0, class_id=1, dx=0.8, dy=0.8, dz=1.7)]}
    report = evaluate(dets, gts, ("vehicle", "pedestrian", "cyclist"))
    assert report.classes[0].ap == pytest.approx(1.0)
    assert report.classes[1].ap == pytest.approx(1.0)
    assert report.classes[2].no_ground_truth
    assert report.classes[2].ap == 0.0
    assert report.map == pytest.approx(2 / 3)
    table = report.format_table()
    assert "no ground truth" in table
    assert "mAP" in table
    d = report.to_dict()
    assert set(d) == {"classes", "iou_thresholds", "map", "maph", "map_r40"}


def test_curve_csv_rows():
    rows = curve_csv_rows([PrPoint(0.9, 1.0, 0.5, 0.75)])
    assert rows[0] == "threshold,precision,recall,heading_precision"
    assert rows[1] == "0.9,1,0.5,0.75"


def test_conditional_precision_constant_conditioner():
    frames = [Frame("f0", np.zeros((0, 5)),
                    [det(0, 0, 0.9), det(50, 0, 0.8), det(20, 0, 0.7)],
                    [gt(0, 0), gt(20, 0)])]
    cond = conditional_precision(frames, lambda d, f: 1.0, 1,
                                 score_threshold=0.0, class_count=1,
                                 iou_thresholds=(0.7,))
    assert cond.counts.tolist() == [3]
    assert cond.precision[0] == pytest.approx(2 / 3)


def test_conditional_precision_empty_bin_absent():
    frames = [Frame("f0", np.zeros((0, 5)), [det(0, 0, 0.9)], [gt(0, 0)])]
    cond = conditional_precision(frames, "length", np.array([0., 2., 10.]),
                                 class_count=1, iou_thresholds=(0.7,))
    assert cond.precision[0] is None  # no detections shorter than 2 m
    assert cond.precision[1] == pytest.approx(1.0)
    rows = cond.csv_rows()
    assert rows[1].endswith(",")  # absent precision, not 0


def test_conditional_precision_score_threshold():
    frames = [Frame("f0", np.zeros((0, 5)),
                    [det(0, 0, 0.9), det(50, 0, 0.2)], [gt(0, 0)])]
    cond = conditional_precision(frames, lambda d, f: 0.5, 1,
                                 score_threshold=0.5, class_count=1,
                                 iou_thresholds=(0.7,))
    assert cond.counts.tolist() == [1]
    assert cond.precision[0] == pytest.approx(1.0)


def test_filter_by_point_count():
    pts = np.zeros((30, 5), dtype=np.float32)
    pts[:, 0] = 0.1  # all 30 points inside the first gt
    frames = [Frame("f0", pts,
                    [det(0, 0, 0.9), det(20, 0, 0.8)],
                    [gt(0, 0), gt(20, 0)])]
    dets, gts = filter_by_point_count(frames, min_points=5,
                                      class_count=1, iou_thresholds=(0.7,))
    assert len(gts["f0"]) == 1          # sparse gt excluded
    assert len(dets["f0"]) == 1         # its detection ignored, not an FP
    assert dets["f0"][0].box.cx == 0.0
