import csv
import math
import os

import numpy as np
import pytest

from adapt3d.geometry import Box3D
from adapt3d.metrics import (
    Detection,
    average_precision,
    build_report,
    dim_stats,
    full_report,
    tp_errors,
)


def box_at(x, dims=(2.0, 1.0, 1.0), yaw=0.0, z=0.0):
    return Box3D(x, 0.0, z, dims[0], dims[1], dims[2], yaw)


def det(x, score, scene_id=0, **kw):
    return Detection(box=box_at(x, **kw), score=score, scene_id=scene_id)


# ---- average precision ------------------------------------------------------


def test_ap_perfect_detections():
    gts = {0: [box_at(0.0), box_at(10.0)]}
    dets = [det(0.0, 0.9), det(10.0, 0.8)]
    ap, (recall, precision), matches = average_precision(dets, gts)
    assert math.isclose(ap, 1.0)
    assert recall[-1] == 1.0
    assert np.all(precision == 1.0)
    assert len(matches) == 2


def test_ap_no_detections():
    ap, _, matches = average_precision([], {0: [box_at(0.0)]})
    assert ap == 0.0 and matches == []


def test_ap_zero_gts_warns_sentinel():
    with pytest.warns(UserWarning):
        ap, _, _ = average_precision([det(0.0, 0.5)], {0: []})
    assert ap == -1.0


def test_ap_false_positive_before_tp():
    # ranked: FP (0.9), TP (0.8) -> precision at recall 1.0 is 1/2
    gts = {0: [box_at(0.0)]}
    dets = [det(50.0, 0.9), det(0.0, 0.8)]
    ap, _, _ = average_precision(dets, gts)
    assert math.isclose(ap, 0.5)


def test_ap_all_point_interpolation_hand_case():
    # 2 gts; ranked TP, FP, TP: precisions 1, 1/2, 2/3
    # envelope: max from right -> 1, 2/3, 2/3; AP = 0.5*1 + 0.5*(2/3)
    gts = {0: [box_at(0.0), box_at(10.0)]}
    dets = [det(0.0, 0.9), det(50.0, 0.8), det(10.0, 0.7)]
    ap, _, _ = average_precision(dets, gts)
    assert math.isclose(ap, 0.5 + 0.5 * (2.0 / 3.0))


def test_ap_each_gt_matched_once():
    # two near-identical detections of the same gt: second one is a FP
    gts = {0: [box_at(0.0)]}
    dets = [det(0.0, 0.9), det(0.01, 0.8)]
    ap, _, matches = average_precision(dets, gts)
    assert len(matches) == 1
    assert math.isclose(ap, 1.0)  # the TP is ranked first


def test_ap_respects_iou_threshold():
    gts = {0: [box_at(0.0)]}
    shifted = [det(0.5, 0.9)]  # IoU = 1.5/2.5 = 0.6 for the 2x1x1 box
    assert average_precision(shifted, gts, iou_thresh=0.7)[0] == 0.0
    assert math.isclose(average_precision(shifted, gts, iou_thresh=0.5)[0], 1.0)


def test_ap_scene_separation():
    # same coordinates in different scenes must not cross-match
    gts = {0: [box_at(0.0)], 1: [box_at(0.0)]}
    dets = [det(0.0, 0.9, scene_id=0), det(0.0, 0.8, scene_id=5)]
    ap, _, matches = average_precision(dets, gts)
    assert len(matches) == 1
    assert math.isclose(ap, 0.5)


def test_ap_score_order_not_input_order():
    gts = {0: [box_at(0.0)]}
    dets = [det(50.0, 0.2), det(0.0, 0.9)]  # TP has the higher score
    ap, _, _ = average_precision(dets, gts)
    assert math.isclose(ap, 1.0)


def test_ap_matches_brute_force_random(rng):
    # reference: independent recomputation with explicit sorting
    for _ in range(5):
        gts = {s: [box_at(10.0 * i, z=0.0) for i in range(rng.integers(1, 4))]
               for s in range(3)}
        dets = []
        for s, boxes in gts.items():
            for b in boxes:
                if rng.uniform() < 0.8:
                    dets.append(Detection(
                        box=box_at(b.cx + rng.uniform(-0.3, 0.3)),
                        score=float(rng.uniform()), scene_id=s))
            if rng.uniform() < 0.5:
                dets.append(det(500.0 + rng.uniform(0, 90), float(rng.uniform()),
                                scene_id=s))
        ap, (rec, prec), _ = average_precision(dets, gts)
        n_gt = sum(len(v) for v in gts.values())
        assert 0.0 <= ap <= 1.0
        assert len(rec) == len(dets)
        assert np.all(np.diff(rec) >= 0)
        # AP never exceeds final recall (envelope precision <= 1)
        assert ap <= rec[-1] + 1e-12 if len(rec) else ap == 0.0


# ---- error stats -------------------------------------------------------------


def test_tp_errors_sentinel():
    assert tp_errors([]) == (-1.0, -1.0, -1.0)


def test_tp_errors_hand_case():
    g = box_at(0.0, dims=(2.0, 2.0, 2.0))
    d = Detection(box=Box3D(0.3, 0.4, 0.0, 2.0, 2.0, 1.0, 0.1), score=1.0,
                  scene_id=0)
    ate, ase, aoe = tp_errors([(d, g)])
    assert math.isclose(ate, 0.5)
    # aligned IoU: inter 2*2*1=4, union 8+4-4=8
    assert math.isclose(ase, 1.0 - 0.5)
    assert math.isclose(aoe, 0.1)


def test_tp_errors_yaw_wraps():
    g = box_at(0.0)
    d = Detection(box=box_at(0.0, yaw=np.pi - 0.05), score=1.0, scene_id=0)
    # yaw difference measured on the circle: pi - 0.05 from 0 is 0.05 past pi
    _, _, aoe = tp_errors([(d, g)])
    assert math.isclose(aoe, np.pi - 0.05)


def test_dim_stats_values():
    dets = [det(0.0, 1.0, dims=(4.0, 2.0, 1.0)),
            det(9.0, 1.0, dims=(2.0, 2.0, 3.0))]
    gts = [box_at(0.0, dims=(3.0, 2.0, 2.0))]
    st = dim_stats(dets, gts)
    assert np.allclose(st["det_mean"], [3.0, 2.0, 2.0])
    assert np.allclose(st["det_std"], [1.0, 0.0, 1.0])
    assert np.allclose(st["gt_mean"], [3.0, 2.0, 2.0])
    with pytest.raises(ValueError):
        dim_stats([], gts)


def test_full_report_fields():
    gts = {0: [box_at(0.0), box_at(10.0)]}
    dets = [det(0.0, 0.9), det(10.05, 0.8)]
    rep = full_report(dets, gts)
    assert math.isclose(rep.ap, 1.0)
    assert rep.ate > 0.0
    assert rep.det_dim_mean is not None
    assert np.allclose(rep.gt_dim_mean, [2.0, 1.0, 1.0])


# ---- report assembly ---------------------------------------------------------


def test_build_report_files_and_content(tmp_path):
    runs = {"adapted": {"ap": 0.5, "ate": 0.1},
            "direct": {"ap": 0.25}}
    curves = {"val": [(0, 0.1), (1, 0.4)]}
    dims = {"pred": np.array([[4.0, 2.0, 1.5], [4.2, 2.1, 1.6]])}
    path = build_report(runs, tmp_path, dims_samples=dims, curves=curves)
    assert os.path.basename(path) == "metrics.csv"
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["run", "ap", "ate"]
    assert rows[1][0] == "adapted" and rows[1][1] == "0.5"
    assert rows[2][0] == "direct" and rows[2][2] == "nan"
    with open(tmp_path / "pr_curve.csv") as f:
        prc = list(csv.reader(f))
    assert prc[1] == ["val", "0", "0.1"]
    with open(tmp_path / "dims_hist.csv") as f:
        hist = list(csv.reader(f))
    assert hist[0] == ["series", "axis", "bin_lo", "bin_hi", "count"]
    assert sum(int(r[4]) for r in hist[1:] if r[1] == "length") == 2
    assert (tmp_path / "curves.svg").exists()
    assert (tmp_path / "dims.svg").exists()


def test_build_report_deterministic_bytes(tmp_path):
    runs = {"b": {"ap": 1 / 3}, "a": {"ap": 2 / 7, "extra": 1e-9}}
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    build_report(runs, a_dir)
    build_report(runs, b_dir)
    for name in ("metrics.csv", "pr_curve.csv", "dims_hist.csv"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()
