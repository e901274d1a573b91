"""Detection metrics and domain-gap diagnostics.

Average precision uses all-point precision-recall interpolation with greedy
descending-score matching (each ground-truth box matched at most once).
Translation / scale / orientation errors are computed over the true-positive
matches of that same matching.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, iou3d


@dataclass
class Detection:
    """One final prediction after NMS."""
    box: Box3D
    score: float
    scene_id: int


@dataclass
class MetricReport:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    ate: float
    ase: float
    aoe: float
    det_dim_mean: np.ndarray = None
    det_dim_std: np.ndarray = None
    gt_dim_mean: np.ndarray = None
    gt_dim_std: np.ndarray = None


def average_precision(dets, gts_by_scene, iou_thresh=0.7):
    """All-point interpolated AP plus the PR samples and matched pairs.

    `gts_by_scene` maps scene id -> list of Box3D.  Returns (ap, (recall,
    precision), matches) where matches is a list of (det, gt_box) pairs.
    Zero ground truths is undefined: returns (-1, empty, empty) with a warning.
    """
    n_gt = sum(len(v) for v in gts_by_scene.values())
    if n_gt == 0:
        warnings.warn("average_precision undefined with zero ground truths")
        return -1.0, (np.zeros(0), np.zeros(0)), []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = {sid: np.zeros(len(boxes), dtype=bool)
               for sid, boxes in gts_by_scene.items()}
    tp = np.zeros(len(order))
    matches = []
    for rank, i in enumerate(order):
        d = dets[i]
        boxes = gts_by_scene.get(d.scene_id, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(boxes):
            if matched[d.scene_id][j]:
                continue
            v = iou3d(d.box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[d.scene_id][best_j] = True
            tp[rank] = 1.0
            matches.append((d, boxes[best_j]))
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (np.arange(len(order)) + 1.0)
    # all-point interpolation: precision envelope from the right
    if len(order) == 0:
        return 0.0, (np.zeros(0), np.zeros(0)), []
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = 0.0
    ap = 0.0
    for k in range(len(order)):
        ap += (recall[k] - r_prev) * prec_env[k]
        r_prev = recall[k]
    return float(ap), (recall, precision), matches


def dim_stats(dets, gts):
    """Per-axis sample mean/std of detection and ground-truth dimensions."""
    if not dets or not gts:
        raise ValueError("dim_stats needs nonempty detection and gt sets")
    d = np.stack([x.box.dims if isinstance(x, Detection) else x.dims for x in dets])
    g = np.stack([x.dims for x in gts])
    return {"det_mean": d.mean(axis=0), "det_std": d.std(axis=0),
            "gt_mean": g.mean(axis=0), "gt_std": g.std(axis=0)}


def _aligned_iou(dims_a, dims_b):
    """IoU of two boxes with coincident centers and aligned axes."""
    inter = np.prod(np.minimum(dims_a, dims_b))
    union = np.prod(dims_a) + np.prod(dims_b) - inter
    return inter / union


def tp_errors(matches):
    """(ATE, ASE, AOE) over matched det-gt pairs; sentinel (-1,-1,-1) if none."""
    if not matches:
        return (-1.0, -1.0, -1.0)
    ates, ases, aoes = [], [], []
    for d, g in matches:
        box = d.box if isinstance(d, Detection) else d
        ates.append(float(np.linalg.norm(box.center - g.center)))
        ases.append(1.0 - _aligned_iou(box.dims, g.dims))
        dyaw = abs(box.yaw - g.yaw) % (2.0 * np.pi)
        aoes.append(min(dyaw, 2.0 * np.pi - dyaw))
    return (float(np.mean(ates)), float(np.mean(ases)), float(np.mean(aoes)))


def full_report(dets, gts_by_scene, iou_thresh=0.7) -> MetricReport:
    ap, (recall, precision), matches = average_precision(dets, gts_by_scene,
                                                         iou_thresh)
    ate, ase, aoe = tp_errors(matches)
    rep = MetricReport(ap=ap, precision=precision, recall=recall,
                       ate=ate, ase=ase, aoe=aoe)
    gts = [b for v in gts_by_scene.values() for b in v]
    if dets and gts:
        st = dim_stats(dets, gts)
        rep.det_dim_mean, rep.det_dim_std = st["det_mean"], st["det_std"]
        rep.gt_dim_mean, rep.gt_dim_std = st["gt_mean"], st["gt_std"]
    return rep


# ---- report assembly --------------------------------------------------------


def _f9(v):
    return f"{float(v):.9g}"


def build_report(runs, out_dir, dims_samples=None, curves=None):
    """Assemble CSV tables and SVG plots from completed run summaries.

    `runs`: {run_name: {metric: value}} -> metrics.csv (rows sorted by name).
    `curves`: {curve_name: list of (x, y)} -> pr_curve.csv + curves.svg.
    `dims_samples`: {series_name: (n, 3) dims array} -> dims_hist.csv + dims.svg.
    Missing/failed runs should simply be absent; the report covers the rest.
    """
    os.makedirs(out_dir, exist_ok=True)
    keys = sorted({k for rec in runs.values() for k in rec})
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run"] + keys)
        for name in sorted(runs):
            w.writerow([name] + [_f9(runs[name].get(k, float("nan")))
                                 for k in keys])

    curves = curves or {}
    with open(os.path.join(out_dir, "pr_curve.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["curve", "x", "y"])
        for name in sorted(curves):
            for x, y in curves[name]:
                w.writerow([name, _f9(x), _f9(y)])

    dims_samples = dims_samples or {}
    hist_rows = []
    for name in sorted(dims_samples):
        arr = np.asarray(dims_samples[name])
        for axis, label in enumerate(("length", "width", "height")):
            counts, edges = np.histogram(arr[:, axis], bins=12)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                hist_rows.append([name, label, _f9(lo), _f9(hi), int(c)])
    with open(os.path.join(out_dir, "dims_hist.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["series", "axis", "bin_lo", "bin_hi", "count"])
        w.writerows(hist_rows)

    _plot_svg(curves, dims_samples, out_dir)
    return os.path.join(out_dir, "metrics.csv")


def _plot_svg(curves, dims_samples, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        pts = np.array(curves[name]) if len(curves[name]) else np.zeros((0, 2))
        if len(pts):
            ax.plot(pts[:, 0], pts[:, 1], label=name)
    ax.set_xlabel("epoch / recall")
    ax.set_ylabel("value")
    if curves:
        ax.legend(fontsize=7)
    fig.savefig(os.path.join(out_dir, "curves.svg"))
    plt.close(fig)

    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for axis, label in enumerate(("length", "width", "height")):
        for name in sorted(dims_samples):
            arr = np.asarray(dims_samples[name])
            axes[axis].hist(arr[:, axis], bins=12, alpha=0.5, label=name)
        axes[axis].set_title(label)
    if dims_samples:
        axes[0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "dims.svg"))
    plt.close(fig)
