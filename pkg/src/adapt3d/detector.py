"""Miniature two-stage point-based detector.

Stage 1: a per-point MLP backbone with batchnorm and one k-nearest-neighbor
aggregation layer feeds a point-proposal head that emits per-point class
logits and box residuals.  Stage 2 pools the points inside each selected
proposal in the proposal's canonical frame and refines confidence and box.

Box residual encoding (8 raw values -> 7-DoF box): center offsets, log-dim
residuals against a reference (the configured anchor dims in stage 1, the
proposal dims in stage 2), and yaw as a (sin, cos) pair decoded by atan2.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (BnState, StatsMode, Tensor, batchnorm,
                       binary_cross_entropy, forward_linear, smooth_l1)
from .config import DetectorConfig
from .geometry import (Box3D, canonical_transform, canonical_yaw, iou3d,
                       min_area_rect, nms, points_in_box, rot_z)

CHECKPOINT_VERSION = 1
LOG_DIM_CLIP = 4.0  # decode clamps log-dim residuals to keep geometry sane
BOX_LOSS_WEIGHT = 2.0  # box regression terms vs classification terms


class DegenerateNeighborhoodError(ValueError):
    """Raised when a scene has fewer points than the neighborhood size."""


class IncompatibleModelsError(ValueError):
    """Raised when two model states do not share parameter/BN name sets."""


_LAYER_SPECS = (
    ("bb.fc1", 3, 64), ("bb.fc2", 64, 128),
    ("bb.edge1", 3, 64), ("bb.edge2", 64, 128),
    ("bb.fc3", 256, 128),
    ("rpn.cls", 152, 2), ("rpn.box", 24, 8),
    ("ref.fc1", 3, 64), ("ref.fc2", 64, 128),
    ("ref.cls", 167, 1), ("ref.box", 39, 8),
)
_BN_SPECS = (("bb.bn1", 64), ("bb.bn2", 128),
             ("bb.ebn1", 64), ("bb.ebn2", 128),
             ("bb.bn3", 128),
             ("ref.bn1", 64), ("ref.bn2", 128))
_HEAD_NAMES = ("rpn.cls", "rpn.box", "ref.cls", "ref.box")


class ModelState:
    """Named learnable parameters plus per-layer BN running statistics."""

    def __init__(self, params, bn):
        self.params = params  # name -> Tensor (includes bn gamma/beta)
        self.bn = bn  # name -> BnState (gamma/beta alias the param tensors)

    @classmethod
    def build(cls, rng, bn_momentum=0.05, requires_grad=True):
        params = {}
        for name, fan_in, fan_out in _LAYER_SPECS:
            std = 0.01 if name in _HEAD_NAMES else math.sqrt(2.0 / fan_in)
            params[f"{name}.W"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)),
                                         requires_grad=requires_grad)
            params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=requires_grad)
        bn = {}
        for name, ch in _BN_SPECS:
            st = BnState.create(ch, momentum=bn_momentum, requires_grad=requires_grad)
            bn[name] = st
            params[f"{name}.gamma"] = st.gamma
            params[f"{name}.beta"] = st.beta
        return cls(params, bn)

    def clone(self, requires_grad=False):
        params = {n: Tensor(p.data.copy(), requires_grad=requires_grad)
                  for n, p in self.params.items()}
        bn = {}
        for name, st in self.bn.items():
            bn[name] = BnState(gamma=params[f"{name}.gamma"],
                               beta=params[f"{name}.beta"],
                               running_mean=st.running_mean.copy(),
                               running_var=st.running_var.copy(),
                               momentum=st.momentum)
        return ModelState(params, bn)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def check_compatible(self, other):
        if set(self.params) != set(other.params) or set(self.bn) != set(other.bn):
            missing = set(self.params) ^ set(other.params)
            raise IncompatibleModelsError(
                f"parameter name sets differ: {sorted(missing)}")
        for n, p in self.params.items():
            if p.data.shape != other.params[n].data.shape:
                raise IncompatibleModelsError(f"shape mismatch for {n}")


# ---- prediction containers --------------------------------------------------


@dataclass
class PointProposals:
    """Stage-1 outputs, one row per sampled point (index-aligned)."""
    cls: Tensor  # (m, 2) logits: background, foreground
    box: Tensor  # (m, 8) raw residuals

    def fg_probs(self):
        z = self.cls.data - self.cls.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True))[:, 1]


@dataclass
class ProposalSet:
    """High-confidence decoded proposals after stage-1 NMS."""
    boxes: list  # of Box3D
    scores: np.ndarray

    def __len__(self):
        return len(self.boxes)


@dataclass
class RefinedPredictions:
    """Stage-2 outputs, order-aligned with the input proposals."""
    confs: list  # of scalar Tensors (sigmoid probabilities)
    raws: list  # of (8,) Tensors (residuals w.r.t. the proposal)
    valid: list  # of bool; False rows carry sentinel zeros

    def __len__(self):
        return len(self.confs)

    def conf_values(self):
        return np.array([float(c.data) for c in self.confs])


# ---- residual encode / decode ----------------------------------------------


def encode_to_point(box: Box3D, point, anchor_dims):
    """Raw stage-1 target for a point: offsets, log-dim vs anchor, sin/cos yaw.

    The yaw is canonicalized to a half circle before encoding: a box flipped
    by pi is geometrically identical, so full-circle targets would be
    contradictory across visually identical objects.
    """
    anchor = np.asarray(anchor_dims, dtype=np.float64)
    yaw = canonical_yaw(box.yaw)
    return np.concatenate([box.center - np.asarray(point),
                           np.log(box.dims / anchor),
                           [math.sin(yaw), math.cos(yaw)]])


def decode_point_residual(raw, point, anchor_dims):
    anchor = np.asarray(anchor_dims, dtype=np.float64)
    center = np.asarray(point) + raw[:3]
    dims = anchor * np.exp(np.clip(raw[3:6], -LOG_DIM_CLIP, LOG_DIM_CLIP))
    yaw = math.atan2(raw[6], raw[7])
    return Box3D(*center, *dims, yaw)


def encode_to_proposal(box: Box3D, prop: Box3D):
    """Raw stage-2 target: canonical-frame offsets, log-dim vs proposal, d-yaw.

    The yaw delta is canonicalized to a half circle (see encode_to_point).
    """
    dc = rot_z(prop.yaw).T @ (box.center - prop.center)
    dyaw = canonical_yaw(box.yaw - prop.yaw)
    return np.concatenate([dc, np.log(box.dims / prop.dims),
                           [math.sin(dyaw), math.cos(dyaw)]])


def decode_proposal_residual(raw, prop: Box3D):
    center = prop.center + rot_z(prop.yaw) @ raw[:3]
    dims = prop.dims * np.exp(np.clip(raw[3:6], -LOG_DIM_CLIP, LOG_DIM_CLIP))
    yaw = prop.yaw + math.atan2(raw[6], raw[7])
    return Box3D(*center, *dims, yaw)


# ---- forward passes ---------------------------------------------------------


def _principal_angle(cov):
    """BEV major-axis angle in (-pi/2, pi/2] from (batched) 3x3 covariances."""
    cov = np.asarray(cov)
    return 0.5 * np.arctan2(2.0 * cov[..., 0, 1], cov[..., 0, 0] - cov[..., 1, 1])


def _knn_indices(pts, k, d2=None):
    if d2 is None:
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    order = np.argsort(np.take_along_axis(d2, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


CLUSTER_RADIUS = 1.35  # single-linkage radius; objects are kept farther apart
CLUSTER_MIN_POINTS = 8


def _cluster_labels(d2, radius):
    """Connected components of the radius graph (single linkage)."""
    n = d2.shape[0]
    adj = d2 <= radius * radius
    labels = np.full(n, -1, dtype=np.intp)
    nxt = 0
    for i in range(n):
        if labels[i] >= 0:
            continue
        comp = np.zeros(n, dtype=bool)
        frontier = np.zeros(n, dtype=bool)
        frontier[i] = True
        while frontier.any():
            comp |= frontier
            frontier = adj[frontier].any(axis=0) & ~comp
        labels[comp] = nxt
        nxt += 1
    return labels


def _cluster_candidates(pts, d2):
    """Per-point box-candidate features from radius-linkage clusters.

    Each dense cluster gets one min-area-rectangle + vertical-extent fit;
    every member point receives [fit center - point, log fit dims, sin/cos of
    the fit angle, log member count].  The count tells the heads how much to
    trust the fit: extent estimates from few returns are biased small and
    noisy, and the reliability varies with sampling density.  Sparse clusters
    (clutter) receive zeros.
    """
    n = pts.shape[0]
    out = np.zeros((n, 9))
    labels = _cluster_labels(d2, CLUSTER_RADIUS)
    for lbl in range(labels.max() + 1):
        member = np.flatnonzero(labels == lbl)
        if member.size < CLUSTER_MIN_POINTS:
            continue
        sub = pts[member]
        cx, cy, dx, dy, ang = min_area_rect(sub[:, :2])
        zlo, zhi = sub[:, 2].min(), sub[:, 2].max()
        dims = np.maximum([dx, dy, zhi - zlo], 1e-3)
        center = np.array([cx, cy, 0.5 * (zlo + zhi)])
        feat = np.concatenate([np.zeros(3), np.log(dims),
                               [math.sin(ang), math.cos(ang),
                                math.log(member.size)]])
        out[member] = feat
        out[member, :3] = center - sub
    return out


def _mlp_block(x, state, fc_name, bn_name, mode, training):
    y = forward_linear(x, state.params[f"{fc_name}.W"], state.params[f"{fc_name}.b"])
    return batchnorm(y, state.bn[bn_name], mode, training).relu()


def backbone_forward(pts, state: ModelState, mode: StatsMode, training: bool,
                     k: int = 8):
    """Per-point features with one k-nearest-neighbor aggregation layer.

    Two paths are concatenated per point: an MLP (3->64->128) on the point's
    coordinates, and a max-pool over its k neighbors of an MLP (3->64->128)
    applied to the relative offsets p_j - p_i.  Relative offsets (rather
    than the neighbors' coordinate features) give the aggregation a
    translation-invariant view of local geometry, which the detection heads
    need.  A second MLP maps the 256-d concatenation to 128-d features.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    if n < 16:
        raise DegenerateNeighborhoodError(f"backbone needs >= 16 points, got {n}")
    if n < k:
        raise DegenerateNeighborhoodError(f"fewer points ({n}) than neighbors ({k})")
    # the point path sees scene-centered coordinates: absolute layout varies
    # wildly between scenes, which would make eval-time running BN statistics
    # a poor stand-in for the per-scene batch statistics seen in training
    x = Tensor(pts - pts.mean(axis=0))
    h = _mlp_block(x, state, "bb.fc1", "bb.bn1", mode, training)
    h = _mlp_block(h, state, "bb.fc2", "bb.bn2", mode, training)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    idx = _knn_indices(pts, k, d2)
    offsets = pts[idx.ravel()] - np.repeat(pts, k, axis=0)
    e = _mlp_block(Tensor(offsets), state, "bb.edge1", "bb.ebn1", mode, training)
    e = _mlp_block(e, state, "bb.edge2", "bb.ebn2", mode, training)
    neigh = e.reshape(n, k, e.data.shape[1]).max(axis=1)
    from .autodiff import concat
    cat = concat([h, neigh], axis=1)
    feats = _mlp_block(cat, state, "bb.fc3", "bb.bn3", mode, training)
    # raw neighbor-offset statistics bypass batchnorm: the mean offset points
    # toward the local mass, the extremes describe the neighborhood extent and
    # the covariance entries carry the local surface orientation
    off = offsets.reshape(n, k, 3)
    mu = off.mean(axis=1, keepdims=True)
    d = off - mu
    cov = np.einsum("nki,nkj->nij", d, d) / k
    stats = np.concatenate([mu[:, 0, :], off.min(axis=1), off.max(axis=1),
                            cov[:, 0, 0, None], cov[:, 1, 1, None],
                            cov[:, 0, 1, None], cov[:, 2, 2, None],
                            np.sin(2 * _principal_angle(cov))[:, None],
                            np.cos(2 * _principal_angle(cov))[:, None],
                            _cluster_candidates(pts, d2)],
                           axis=1)
    return concat([feats, Tensor(stats)], axis=1)


STAT_DIM = 24  # trailing raw-statistics columns of the backbone output


def rpn_forward(features, state: ModelState) -> PointProposals:
    cls = forward_linear(features, state.params["rpn.cls.W"], state.params["rpn.cls.b"])
    # the box head reads only the raw statistics columns; see refine_forward
    # for why batch-normalized features are kept out of box regression
    stats = features[:, features.data.shape[1] - STAT_DIM:]
    box = forward_linear(stats, state.params["rpn.box.W"], state.params["rpn.box.b"])
    return PointProposals(cls=cls, box=box)


def decode_and_select(proposals: PointProposals, pts, cfg: DetectorConfig) -> ProposalSet:
    """Decode all point proposals, rank by foreground probability, NMS, cap."""
    probs = proposals.fg_probs()
    keep = np.flatnonzero(probs >= cfg.rpn_min_score)
    if keep.size == 0:
        return ProposalSet(boxes=[], scores=np.zeros(0))
    boxes = [decode_point_residual(proposals.box.data[i], pts[i], cfg.anchor_dims)
             for i in keep]
    kept = nms(boxes, probs[keep], cfg.rpn_nms_thresh, max_keep=cfg.proposal_cap)
    return ProposalSet(boxes=[boxes[i] for i in kept], scores=probs[keep][kept])


def _fit_candidate(local, box: Box3D):
    """Direct geometric box estimate from the gathered canonical-frame points.

    Isolated points (stray clutter caught by the enlarged gather) are trimmed
    by nearest-neighbor distance, then a minimum-area oriented rectangle plus
    the vertical extent yields a candidate residual in the target encoding.
    The refinement head only has to learn corrections around it.
    """
    if len(local) >= 8:
        d2 = ((local[:, None, :] - local[None, :, :]) ** 2).sum(axis=2)
        nn = np.sqrt(np.partition(d2, 1, axis=1)[:, 1])
        keep = nn <= max(2.5 * float(np.median(nn)), 0.3)
        if keep.sum() >= 4:
            local = local[keep]
    cx, cy, dx, dy, ang = min_area_rect(local[:, :2])
    zlo, zhi = local[:, 2].min(), local[:, 2].max()
    dims = np.maximum([dx, dy, zhi - zlo], 1e-3)
    logres = np.clip(np.log(dims / box.dims), -LOG_DIM_CLIP, LOG_DIM_CLIP)
    return np.concatenate([[cx, cy, 0.5 * (zlo + zhi)], logres,
                           [math.sin(ang), math.cos(ang)]])


def refine_forward(pts, proposals, state: ModelState, mode: StatsMode,
                   training: bool, cfg: DetectorConfig) -> RefinedPredictions:
    """Pool interior points per proposal in canonical frame, refine conf + box.

    Proposals with fewer than cfg.min_pool_points interior points (after
    enlargement) take the sentinel path: confidence 0 and zero residuals.
    """
    from .autodiff import concat
    pts = np.asarray(pts, dtype=np.float64)
    boxes = proposals.boxes if isinstance(proposals, ProposalSet) else list(proposals)
    locals_, stats_, live = [], [], []
    for j, box in enumerate(boxes):
        inside = points_in_box(pts, box.enlarged(cfg.roi_enlarge))
        if inside.size < cfg.min_pool_points:
            continue
        local = canonical_transform(pts[inside], box)
        # the pooled MLP feature is batch-normalized, which suppresses the
        # gather's mean -- exactly the signal that localizes the object in
        # the canonical frame.  Raw coordinate statistics restore it:
        # per-axis quantiles carry center/extent (robustly to stray clutter
        # inside the enlarged gather), the covariance carries orientation,
        # and a direct rectangle fit supplies a full box candidate.
        mu = local.mean(axis=0)
        centered = local - mu
        cov = centered.T @ centered / len(local)
        quant = np.quantile(local, (0.0, 0.1, 0.5, 0.9, 1.0), axis=0)
        spans = np.concatenate([quant[4] - quant[0], quant[3] - quant[1]])
        phi = _principal_angle(cov)
        locals_.append(local)
        stats_.append(np.concatenate([mu, quant.ravel(),
                                      [cov[0, 0], cov[1, 1], cov[0, 1],
                                       cov[2, 2]],
                                      np.log(np.maximum(spans, 1e-3)),
                                      [math.sin(phi), math.cos(phi),
                                       # gather density: extent estimates from
                                       # few returns are biased small, so the
                                       # head needs the count to calibrate
                                       math.log(len(local))],
                                      _fit_candidate(local, box)]))
        live.append(j)

    confs = [Tensor(0.0)] * len(boxes)
    raws = [Tensor(np.zeros(8))] * len(boxes)
    valid = [False] * len(boxes)
    if live:
        # all gathers share one MLP pass; per-gather max pooling uses padded
        # duplicate indices, which cannot change a maximum
        flat = np.concatenate(locals_, axis=0)
        h = _mlp_block(Tensor(flat), state, "ref.fc1", "ref.bn1", mode, training)
        h = _mlp_block(h, state, "ref.fc2", "ref.bn2", mode, training)
        lens = [len(l) for l in locals_]
        lmax = max(lens)
        starts = np.cumsum([0] + lens[:-1])
        idx = np.stack([np.minimum(np.arange(lmax), ln - 1) + s0
                        for ln, s0 in zip(lens, starts)])
        pooled = h.take_rows(idx.ravel()).reshape(len(live), lmax, -1).max(axis=1)
        st = Tensor(np.stack(stats_))
        f = concat([pooled, st], axis=1)
        conf_col = forward_linear(f, state.params["ref.cls.W"],
                                  state.params["ref.cls.b"]).sigmoid()
        # the box head reads only the raw geometric statistics: the pooled
        # feature's batch statistics shift between training and eval modes,
        # which would wreck regression precision
        raw_rows = forward_linear(st, state.params["ref.box.W"],
                                  state.params["ref.box.b"])
        for r, j in enumerate(live):
            confs[j] = conf_col[r, 0].reshape(())
            raws[j] = raw_rows[r, :].reshape(8)
            valid[j] = True
    return RefinedPredictions(confs=confs, raws=raws, valid=valid)


def decode_refined(refined: RefinedPredictions, proposals: ProposalSet):
    """Decoded stage-2 boxes, order-aligned with the proposals."""
    return [decode_proposal_residual(r.data, p)
            for r, p in zip(refined.raws, proposals.boxes)]


def final_predictions(refined: RefinedPredictions, proposals: ProposalSet,
                      cfg: DetectorConfig):
    """Confidence-filtered, NMS-deduplicated refined boxes with scores."""
    confs = refined.conf_values()
    boxes = decode_refined(refined, proposals)
    cand = [i for i in range(len(boxes))
            if refined.valid[i] and confs[i] >= cfg.final_min_score]
    if not cand:
        return [], np.zeros(0)
    kept = nms([boxes[i] for i in cand], confs[cand], cfg.final_nms_thresh)
    idx = [cand[i] for i in kept]
    return [boxes[i] for i in idx], confs[idx]


# ---- supervised loss --------------------------------------------------------


def _assign_foreground(pts, gt_boxes, enlarge=1.0):
    """Per-point gt assignment: index of the first gt box containing it, else -1.

    `enlarge` widens the membership test: object returns can lie outside the
    tight labeled extent, and labeling them background would teach the
    classifier to suppress exactly the points that carry the object.
    """
    assign = np.full(len(pts), -1, dtype=np.intp)
    for gi, box in enumerate(gt_boxes):
        inside = points_in_box(pts, box.enlarged(enlarge))
        fresh = inside[assign[inside] < 0]
        assign[fresh] = gi
    return assign


def supervised_loss(R: PointProposals, S, proposals, pts, gt_boxes,
                    cfg: DetectorConfig):
    """Source-domain loss: stage-1 + stage-2 classification and box terms.

    A point is foreground iff inside a gt box; a proposal is positive iff its
    IoU with some gt reaches cfg.stage2_pos_iou.  Returns (total, parts).
    """
    pts = np.asarray(pts, dtype=np.float64)
    assign = _assign_foreground(pts, gt_boxes, enlarge=cfg.fg_enlarge)
    fg = assign >= 0

    probs = R.cls.softmax(axis=1)
    l_cls1 = binary_cross_entropy(probs[:, 1], fg.astype(np.float64))

    zero = Tensor(0.0)
    l_box1 = zero
    if np.any(fg):
        fg_idx = np.flatnonzero(fg)
        targets = np.stack([encode_to_point(gt_boxes[assign[i]], pts[i],
                                            cfg.anchor_dims) for i in fg_idx])
        l_box1 = smooth_l1(R.box.take_rows(fg_idx), Tensor(targets))

    l_cls2, l_box2 = zero, zero
    if S is not None and len(S) and gt_boxes:
        from .autodiff import stack as t_stack
        labels, conf_ts, pos_terms = [], [], []
        for j, prop in enumerate(proposals.boxes):
            if not S.valid[j]:
                continue
            ious = [iou3d(prop, g) for g in gt_boxes]
            best = int(np.argmax(ious))
            positive = ious[best] >= cfg.stage2_pos_iou
            labels.append(1.0 if positive else 0.0)
            conf_ts.append(S.confs[j])
            if positive:
                target = encode_to_proposal(gt_boxes[best], prop)
                pos_terms.append(smooth_l1(S.raws[j], Tensor(target)))
        if conf_ts:
            l_cls2 = binary_cross_entropy(t_stack(conf_ts), np.array(labels))
        if pos_terms:
            l_box2 = sum(pos_terms[1:], pos_terms[0]) * (1.0 / len(pos_terms))
    elif S is not None and len(S):
        # no gt boxes: classification-only supervision toward background
        from .autodiff import stack as t_stack
        conf_ts = [S.confs[j] for j in range(len(S)) if S.valid[j]]
        if conf_ts:
            l_cls2 = binary_cross_entropy(t_stack(conf_ts), np.zeros(len(conf_ts)))

    total = l_cls1 + BOX_LOSS_WEIGHT * l_box1 + l_cls2 + BOX_LOSS_WEIGHT * l_box2
    parts = {"cls1": float(l_cls1.data), "box1": float(l_box1.data),
             "cls2": float(l_cls2.data), "box2": float(l_box2.data)}
    return total, parts


# ---- checkpoints ------------------------------------------------------------


def _sig9(arr):
    return [float(f"{v:.9g}") for v in np.asarray(arr, dtype=np.float64).ravel()]


def save_checkpoint(state: ModelState, path):
    doc = {"format_version": CHECKPOINT_VERSION, "params": {}, "bn": {}}
    for name, p in state.params.items():
        doc["params"][name] = {"shape": list(p.data.shape), "data": _sig9(p.data)}
    for name, st in state.bn.items():
        doc["bn"][name] = {"running_mean": _sig9(st.running_mean),
                           "running_var": _sig9(st.running_var),
                           "momentum": st.momentum}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path, requires_grad=False) -> ModelState:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    params = {name: Tensor(np.array(rec["data"]).reshape(rec["shape"]),
                           requires_grad=requires_grad)
              for name, rec in doc["params"].items()}
    bn = {}
    for name, rec in doc["bn"].items():
        bn[name] = BnState(gamma=params[f"{name}.gamma"],
                           beta=params[f"{name}.beta"],
                           running_mean=np.array(rec["running_mean"]),
                           running_var=np.array(rec["running_var"]),
                           momentum=rec["momentum"])
    return ModelState(params, bn)


# ---- inference --------------------------------------------------------------


def detect(scene, state: ModelState, cfg: DetectorConfig, sample_seed=0):
    """Full eval-mode inference on one scene -> (boxes, scores)."""
    from .scenes import sample_points
    pts, _ = sample_points(scene, cfg.sample_m, np.random.default_rng(sample_seed))
    feats = backbone_forward(pts, state, StatsMode.EXTERNAL, training=False,
                             k=cfg.k_neighbors)
    R = rpn_forward(feats, state)
    G = decode_and_select(R, pts, cfg)
    if not len(G):
        return [], np.zeros(0)
    # cascade: each round re-gathers around the previous round's boxes, which
    # recovers objects only partially covered by the initial gather
    S = refine_forward(pts, G, state, StatsMode.EXTERNAL, training=False, cfg=cfg)
    for _ in range(max(cfg.refine_rounds - 1, 0)):
        boxes = [b if S.valid[j] else G.boxes[j]
                 for j, b in enumerate(decode_refined(S, G))]
        G = ProposalSet(boxes=boxes, scores=G.scores)
        S = refine_forward(pts, G, state, StatsMode.EXTERNAL, training=False,
                           cfg=cfg)
    return final_predictions(S, G, cfg)
