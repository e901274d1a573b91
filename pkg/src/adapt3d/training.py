"""Mean-teacher consistency training.

A gradient-free teacher, whose learnable parameters are an exponential moving
average of the student's, supplies targets on unlabeled target-domain scenes.
Consistency is enforced at three levels: per-point class/box predictions over
a shared point sample, per-proposal confidence/box predictions over
replicated teacher proposals, and batchnorm running statistics copied from
student to teacher each step.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import StatsMode, Tensor, kl_divergence, smooth_l1, stack as t_stack
from .config import TrainConfig
from .detector import (ModelState, PointProposals, ProposalSet, RefinedPredictions,
                       backbone_forward, decode_and_select, decode_refined,
                       encode_to_proposal, final_predictions, refine_forward,
                       rpn_forward, supervised_loss, save_checkpoint)
from .geometry import (Box3D, GlobalScaleAug, RoiAug, apply_global_scale,
                       apply_roi_aug, iou3d, points_in_box)
from .rng import stream
from .scenes import sample_points


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component stops being finite; carries a diagnostic."""


# ---- model-state updates ----------------------------------------------------


def ema_update(teacher: ModelState, student: ModelState, m: float):
    """theta' <- m theta' + (1 - m) theta for every learnable parameter.

    BN running statistics are deliberately untouched here; they are
    transferred wholesale by `sync_bn_stats`.
    """
    teacher.check_compatible(student)
    for name, tp in teacher.params.items():
        tp.data *= m
        tp.data += (1.0 - m) * student.params[name].data
    return teacher


def sync_bn_stats(teacher: ModelState, student: ModelState):
    """Overwrite the teacher's BN running statistics with the student's."""
    if set(teacher.bn) != set(student.bn):
        raise_names = sorted(set(teacher.bn) ^ set(student.bn))
        from .detector import IncompatibleModelsError
        raise IncompatibleModelsError(f"BN layer sets differ: {raise_names}")
    for name, st in student.bn.items():
        teacher.bn[name].running_mean = st.running_mean.copy()
        teacher.bn[name].running_var = st.running_var.copy()
    return teacher


class Adam:
    """ADAM with first/second-moment estimates and bias correction."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # name -> Tensor
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            mhat = self.m[n] / (1.0 - b1 ** self.t)
            vhat = self.v[n] / (1.0 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---- paired forward ---------------------------------------------------------


@dataclass
class PredictionPair:
    """Correspondence-preserving student/teacher outputs on one target scene."""
    index_map: np.ndarray  # shared sampled point indices into the scene
    pts_teacher: np.ndarray  # (M, 3) teacher input
    pts_student: np.ndarray  # (M, 3) = h(pts_teacher)
    scale: float  # the drawn h
    R_teacher: PointProposals  # gradient-free
    R_student: PointProposals
    proposals_teacher: ProposalSet  # G_t
    proposals_student: ProposalSet  # xi(h(G_t))
    S_teacher: RefinedPredictions
    S_student: RefinedPredictions
    # teacher-frame and student-frame final boxes (post stage-2 NMS)
    final_teacher: list = field(default_factory=list)
    final_student: list = field(default_factory=list)
    # nearest-point ablation: row i of the student maps to teacher row nn[i]
    teacher_row_for_student: np.ndarray = None


@dataclass
class MaskSets:
    """Index masks the box-consistency losses average over."""
    p_pos: np.ndarray  # positions (0..M-1) into the shared sample
    s_pos: np.ndarray  # proposal indices with both confidences > epsilon


def _teacher_pipeline(pts, teacher, cfg, rng_roi):
    det = cfg.detector
    feats = backbone_forward(pts, teacher, StatsMode.EXTERNAL, training=False,
                             k=det.k_neighbors)
    R = rpn_forward(feats, teacher)
    G = decode_and_select(R, pts, det)
    augs = [RoiAug.draw(rng_roi, b, cfg.roi_scale_range, cfg.roi_center_frac,
                        cfg.roi_yaw_range) for b in G.boxes]
    G_aug = ProposalSet(boxes=[apply_roi_aug(b, a) for b, a in zip(G.boxes, augs)],
                        scores=G.scores)
    S = refine_forward(pts, G_aug, teacher, StatsMode.EXTERNAL, training=False,
                       cfg=det)
    return R, G, G_aug, S


def forward_pair(scene, student: ModelState, teacher: ModelState,
                 cfg: TrainConfig, rngs, identity_augs=False) -> PredictionPair:
    """Run the paired student/teacher forward on one unlabeled target scene.

    The teacher consumes the raw shared sample in running-statistics mode and
    gradient-free; the student consumes the globally scaled replica in batch
    statistics mode.  Teacher proposals are scaled into the student frame and
    independently RoI-perturbed before student refinement.
    """
    det = cfg.detector
    rng_sample, rng_h, rng_xi_s, rng_xi_t = rngs
    pts_t, idx = sample_points(scene, det.sample_m, rng_sample)

    if identity_augs:
        h = GlobalScaleAug(1.0)
    else:
        h = GlobalScaleAug.draw(rng_h, cfg.h_range[0], cfg.h_range[1])
    s = h.scale

    R_t, G_t, G_t_aug, S_t = _teacher_pipeline(pts_t, teacher, cfg, rng_xi_t)
    if identity_augs:
        G_t_aug = G_t
        S_t = refine_forward(pts_t, G_t, teacher, StatsMode.EXTERNAL,
                             training=False, cfg=det)

    pts_s, _ = apply_global_scale(pts_t, [], h)
    feats_s = backbone_forward(pts_s, student, StatsMode.BATCH, training=True,
                               k=det.k_neighbors)
    R_s = rpn_forward(feats_s, student)

    G_scaled = [b.scaled(s) for b in G_t.boxes]
    if identity_augs:
        G_s_boxes = G_scaled
    else:
        augs = [RoiAug.draw(rng_xi_s, b, cfg.roi_scale_range, cfg.roi_center_frac,
                            cfg.roi_yaw_range) for b in G_scaled]
        G_s_boxes = [apply_roi_aug(b, a) for b, a in zip(G_scaled, augs)]
    G_s = ProposalSet(boxes=G_s_boxes, scores=G_t.scores)
    S_s = refine_forward(pts_s, G_s, student, StatsMode.BATCH, training=True,
                         cfg=det)

    final_t, _ = final_predictions(S_t, ProposalSet(G_t_aug.boxes, G_t.scores), det) \
        if len(G_t) else ([], None)
    final_s, _ = final_predictions(S_s, G_s, det) if len(G_s) else ([], None)

    return PredictionPair(index_map=idx, pts_teacher=pts_t, pts_student=pts_s,
                          scale=s, R_teacher=R_t, R_student=R_s,
                          proposals_teacher=G_t_aug, proposals_student=G_s,
                          S_teacher=S_t, S_student=S_s,
                          final_teacher=final_t, final_student=final_s)


def forward_pair_nearest_point(scene, student, teacher, cfg, rngs):
    """Ablation: independent point samples matched by Euclidean nearest point."""
    det = cfg.detector
    rng_sample, rng_h, rng_xi_s, rng_xi_t = rngs
    pts_t, idx_t = sample_points(scene, det.sample_m, rng_sample)
    pts_s_raw, idx_s = sample_points(scene, det.sample_m, rng_sample)

    h = GlobalScaleAug.draw(rng_h, cfg.h_range[0], cfg.h_range[1])
    s = h.scale

    R_t, G_t, G_t_aug, S_t = _teacher_pipeline(pts_t, teacher, cfg, rng_xi_t)

    pts_s, _ = apply_global_scale(pts_s_raw, [], h)
    feats_s = backbone_forward(pts_s, student, StatsMode.BATCH, training=True,
                               k=det.k_neighbors)
    R_s = rpn_forward(feats_s, student)

    # match student rows to teacher rows in the unscaled frame
    d2 = ((pts_s_raw[:, None, :] - pts_t[None, :, :]) ** 2).sum(axis=2)
    nn = np.argmin(d2, axis=1)

    G_scaled = [b.scaled(s) for b in G_t.boxes]
    augs = [RoiAug.draw(rng_xi_s, b, cfg.roi_scale_range, cfg.roi_center_frac,
                        cfg.roi_yaw_range) for b in G_scaled]
    G_s = ProposalSet(boxes=[apply_roi_aug(b, a) for b, a in zip(G_scaled, augs)],
                      scores=G_t.scores)
    S_s = refine_forward(pts_s, G_s, student, StatsMode.BATCH, training=True,
                         cfg=det)
    final_t, _ = final_predictions(S_t, ProposalSet(G_t_aug.boxes, G_t.scores), det) \
        if len(G_t) else ([], None)
    final_s, _ = final_predictions(S_s, G_s, det) if len(G_s) else ([], None)
    return PredictionPair(index_map=idx_t, pts_teacher=pts_t, pts_student=pts_s,
                          scale=s, R_teacher=R_t, R_student=R_s,
                          proposals_teacher=G_t_aug, proposals_student=G_s,
                          S_teacher=S_t, S_student=S_s,
                          final_teacher=final_t, final_student=final_s,
                          teacher_row_for_student=nn)


# ---- masks ------------------------------------------------------------------


def compute_masks(pair: PredictionPair, cfg: TrainConfig) -> MaskSets:
    """P_pos: points inside final boxes of both models; S_pos: joint conf > eps."""
    m = pair.pts_teacher.shape[0]
    in_student = np.zeros(m, dtype=bool)
    for box in pair.final_student:
        in_student[points_in_box(pair.pts_student, box)] = True
    in_teacher = np.zeros(m, dtype=bool)
    for box in pair.final_teacher:
        in_teacher[points_in_box(pair.pts_teacher, box)] = True
    p_pos = np.flatnonzero(in_student & in_teacher)

    eps = cfg.prob_threshold
    s_conf = pair.S_student.conf_values() if len(pair.S_student) else np.zeros(0)
    t_conf = pair.S_teacher.conf_values() if len(pair.S_teacher) else np.zeros(0)
    n = min(len(s_conf), len(t_conf))
    joint = [j for j in range(n)
             if pair.S_student.valid[j] and pair.S_teacher.valid[j]
             and s_conf[j] > eps and t_conf[j] > eps]
    return MaskSets(p_pos=p_pos, s_pos=np.asarray(joint, dtype=np.intp))


# ---- consistency losses -----------------------------------------------------


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    # multiply by the reciprocal (not divide) to match Tensor.softmax bit for
    # bit, so consistency losses vanish exactly when both branches agree
    return e * e.sum(axis=1, keepdims=True) ** -1.0


def loss_pt_cls(pair: PredictionPair) -> Tensor:
    """Mean per-point KL of student class distribution against the teacher's."""
    p = pair.R_student.cls.softmax(axis=1)
    q_rows = _softmax_rows(pair.R_teacher.cls.data)
    if pair.teacher_row_for_student is not None:
        q_rows = q_rows[pair.teacher_row_for_student]
    return kl_divergence(p, Tensor(q_rows))


def _h_adjust_point_raw(raw, s):
    """Scale a stage-1 residual row into the student frame: offsets and dims."""
    out = raw.copy()
    out[:, :3] *= s
    out[:, 3:6] += math.log(s)
    return out


def loss_pt_box(pair: PredictionPair, masks: MaskSets) -> Tensor:
    """Smooth-L1 between student and h-adjusted teacher box residuals on P_pos."""
    if masks.p_pos.size == 0:
        return Tensor(0.0)
    rows_t = pair.R_teacher.box.data
    if pair.teacher_row_for_student is not None:
        rows_t = rows_t[pair.teacher_row_for_student]
    target = _h_adjust_point_raw(rows_t[masks.p_pos], pair.scale)
    return smooth_l1(pair.R_student.box.take_rows(masks.p_pos), Tensor(target))


def loss_ins_cls(pair: PredictionPair) -> Tensor:
    """Mean per-proposal binary KL of student confidence against the teacher's."""
    n = min(len(pair.S_student), len(pair.S_teacher))
    if n == 0:
        return Tensor(0.0)
    p = t_stack([pair.S_student.confs[j] for j in range(n)])
    p2 = t_stack([p, 1.0 - p], axis=1)
    q = pair.S_teacher.conf_values()[:n]
    q2 = np.stack([q, 1.0 - q], axis=1)
    return kl_divergence(p2, Tensor(q2))


def _h_adjust_proposal_raw(raw, s):
    """Scale stage-2 residuals into the student frame: only offsets scale."""
    out = raw.copy()
    out[:3] *= s
    return out


def loss_ins_box(pair: PredictionPair, masks: MaskSets) -> Tensor:
    """Smooth-L1 between student and h-adjusted teacher refinement residuals."""
    if masks.s_pos.size == 0:
        return Tensor(0.0)
    student = t_stack([pair.S_student.raws[j] for j in masks.s_pos])
    target = np.stack([_h_adjust_proposal_raw(pair.S_teacher.raws[j].data, pair.scale)
                       for j in masks.s_pos])
    return smooth_l1(student, Tensor(target))


# ---- pseudo-label ablation (max-IoU box matching) ---------------------------


def loss_ins_box_max_iou(pair: PredictionPair, cfg: TrainConfig) -> Tensor:
    """Ablation: greedily match student final boxes to teacher pseudo labels."""
    eps = cfg.prob_threshold
    s_conf = pair.S_student.conf_values() if len(pair.S_student) else np.zeros(0)
    t_boxes = [b.scaled(pair.scale) for b in pair.final_teacher]
    terms = []
    for j in range(len(pair.S_student)):
        if not pair.S_student.valid[j] or s_conf[j] <= eps or not t_boxes:
            continue
        sb = decode_refined(pair.S_student, pair.proposals_student)[j]
        ious = [iou3d(sb, tb) for tb in t_boxes]
        best = int(np.argmax(ious))
        if ious[best] <= 0.0:
            continue
        target = encode_to_proposal(t_boxes[best], pair.proposals_student.boxes[j])
        terms.append(smooth_l1(pair.S_student.raws[j], Tensor(target)))
    if not terms:
        return Tensor(0.0)
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


# ---- training steps ---------------------------------------------------------


LOSS_NAMES = ("L_source", "L_pt_cls", "L_pt_box", "L_ins_cls", "L_ins_box")


def _supervised_on_scene(scene, student, cfg, rng_sample, rng_aug, scale_range):
    det = cfg.detector
    pts, _ = sample_points(scene, det.sample_m, rng_sample)
    aug = GlobalScaleAug.draw(rng_aug, scale_range[0], scale_range[1])
    pts, boxes = apply_global_scale(pts, scene.gt_boxes, aug)
    feats = backbone_forward(pts, student, StatsMode.BATCH, training=True,
                             k=det.k_neighbors)
    R = rpn_forward(feats, student)
    G = decode_and_select(R, pts, det)
    # seed stage-2 training with jittered gt boxes alongside the model's own
    # proposals: a tight jitter supplies reliable positives, a broad one
    # covers the noise level of real stage-1 proposals
    rng = rng_aug
    seeded = list(G.boxes)
    for b in boxes:
        seeded.append(apply_roi_aug(b, RoiAug.draw(rng, b, (0.9, 1.1), 0.05, 0.05)))
        seeded.append(apply_roi_aug(b, RoiAug.draw(rng, b, (0.8, 1.25), 0.2, 0.3)))
    props = ProposalSet(boxes=seeded, scores=np.ones(len(seeded)))
    S = refine_forward(pts, props, student, StatsMode.BATCH, training=True, cfg=det)
    total, parts = supervised_loss(R, S, props, pts, boxes, det)
    return total, parts


def consistency_losses(pair: PredictionPair, cfg: TrainConfig):
    """The four consistency components for one pair, honoring the loss mask."""
    masks = compute_masks(pair, cfg)
    zero = Tensor(0.0)
    out = {"L_pt_cls": zero, "L_pt_box": zero, "L_ins_cls": zero, "L_ins_box": zero}
    if "pt_cls" in cfg.loss_mask:
        out["L_pt_cls"] = loss_pt_cls(pair)
    if "pt_box" in cfg.loss_mask:
        out["L_pt_box"] = loss_pt_box(pair, masks)
    if "ins_cls" in cfg.loss_mask:
        out["L_ins_cls"] = loss_ins_cls(pair)
    if "ins_box" in cfg.loss_mask:
        if cfg.matching == "max-iou-box":
            out["L_ins_box"] = loss_ins_box_max_iou(pair, cfg)
        else:
            out["L_ins_box"] = loss_ins_box(pair, masks)
    return out, masks


def train_step(source_scenes, target_scenes, student, teacher, optimizer,
               cfg: TrainConfig, rngs, step_hook=None):
    """One adaptation step: student gradient update, then EMA, then BN sync.

    Returns the five loss components.  `rngs` is a dict of named Generators
    (sample, h, xi_s, xi_t, src_sample, src_aug) pre-derived for this step.
    """
    student.zero_grad()
    zero = Tensor(0.0)

    l_source = zero
    if source_scenes:
        terms = [_supervised_on_scene(sc, student, cfg, rngs["src_sample"],
                                      rngs["src_aug"], cfg.pretrain_scale_range)[0]
                 for sc in source_scenes]
        l_source = sum(terms[1:], terms[0]) * (1.0 / len(terms))

    comps = {"L_pt_cls": zero, "L_pt_box": zero, "L_ins_cls": zero, "L_ins_box": zero}
    if target_scenes:
        for sc in target_scenes:
            quad = (rngs["sample"], rngs["h"], rngs["xi_s"], rngs["xi_t"])
            if cfg.matching == "nearest-point":
                pair = forward_pair_nearest_point(sc, student, teacher, cfg, quad)
            else:
                pair = forward_pair(sc, student, teacher, cfg, quad)
            part, _ = consistency_losses(pair, cfg)
            for k in comps:
                comps[k] = comps[k] + part[k]
        for k in comps:
            comps[k] = comps[k] * (1.0 / len(target_scenes))

    total = cfg.source_weight * l_source + comps["L_pt_cls"] + comps["L_pt_box"] \
        + comps["L_ins_cls"] + comps["L_ins_box"]
    record = {"L_source": float(l_source.data), "L_total": float(total.data),
              **{k: float(v.data) for k, v in comps.items()}}
    bad = [k for k, v in record.items() if not np.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite loss components {bad}: {record}")

    total.backward()
    optimizer.step()
    if step_hook is not None:
        step_hook("optimizer_step")
    m = cfg.momentum if cfg.ema_enabled else 0.0
    ema_update(teacher, student, m)
    if step_hook is not None:
        step_hook("ema_update")
    if cfg.bn_sync_enabled:
        sync_bn_stats(teacher, student)
        if step_hook is not None:
            step_hook("bn_sync")
    return record


# ---- epoch loops ------------------------------------------------------------


def evaluate_ap(scenes, state, det_cfg, iou_thresh=0.7):
    """AP@iou_thresh of eval-mode inference over labeled scenes."""
    from .detector import detect
    from .metrics import Detection, average_precision
    dets, gts = [], {}
    for i, sc in enumerate(scenes):
        boxes, scores = detect(sc, state, det_cfg, sample_seed=sc.seed)
        dets.extend(Detection(box=b, score=float(s), scene_id=i)
                    for b, s in zip(boxes, scores))
        gts[i] = sc.gt_boxes
    ap, _, _ = average_precision(dets, gts, iou_thresh)
    return max(ap, 0.0)


def _write_history(path, rows, fieldnames):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v)
                        for k, v in r.items()})


PRETRAIN_EVAL_EVERY = 5  # epochs between validation-AP measurements

# Damped fixed-point settings for the post-training size calibration.  The
# score/NMS filters react to a bias shift (loop gain above one), so a full
# Newton step oscillates; 0.35 converges in one or two rounds in practice.
CALIB_STEP = 0.35
CALIB_ITERS = 6
CALIB_TOL = 0.01


def calibrate_dims(state, calib_scenes, det_cfg):
    """Remove the mean log-size bias of eval-mode detections.

    Wide random-scale augmentation attenuates the size response of the
    refinement head, which leaves detections on held-out scenes inflated by a
    few percent even when training scenes are fit tightly.  This shifts the
    refinement box-head bias until the population mean of detected sizes on
    held-out labeled scenes matches the ground-truth mean.
    """
    from .detector import detect
    gt = np.mean([b.dims for sc in calib_scenes for b in sc.gt_boxes], axis=0)
    for _ in range(CALIB_ITERS):
        dims = [b.dims for sc in calib_scenes
                for b in detect(sc, state, det_cfg, sample_seed=sc.seed)[0]]
        if not dims:
            break
        bias = np.log(np.mean(dims, axis=0) / gt)
        if float(np.max(np.abs(bias))) < CALIB_TOL:
            break
        state.params["ref.box.b"].data[3:6] -= CALIB_STEP * bias
    return state


def pretrain(dataset_scenes, val_scenes, cfg: TrainConfig, out_dir,
             init_state=None, start_epoch=0, history=None, calib_scenes=None):
    """Supervised source training with wide random-scaling augmentation."""
    os.makedirs(out_dir, exist_ok=True)
    rng_init = stream(cfg.seed, "init")
    student = init_state if init_state is not None else ModelState.build(
        rng_init, bn_momentum=cfg.bn_momentum, requires_grad=True)
    opt = Adam(student.params, lr=cfg.pretrain_lr)
    history = list(history) if history else []
    n = len(dataset_scenes)
    last_good = None
    for epoch in range(start_epoch, start_epoch + cfg.pretrain_epochs):
        # step decay lets the box heads settle well below the noise floor of
        # the initial learning rate
        frac = (epoch - start_epoch) / max(cfg.pretrain_epochs, 1)
        opt.lr = cfg.pretrain_lr * (0.1 if frac >= 0.85 else
                                    0.3 if frac >= 0.6 else 1.0)
        order = stream(cfg.seed, "pretrain_order", epoch).permutation(n)
        losses = []
        for b0 in range(0, n, cfg.batch_size):
            batch = [dataset_scenes[i] for i in order[b0:b0 + cfg.batch_size]]
            student.zero_grad()
            rng_s = stream(cfg.seed, "pretrain_sample", epoch * 10000 + b0)
            rng_a = stream(cfg.seed, "pretrain_aug", epoch * 10000 + b0)
            terms = [_supervised_on_scene(sc, student, cfg, rng_s, rng_a,
                                          cfg.pretrain_scale_range)[0]
                     for sc in batch]
            total = sum(terms[1:], terms[0]) * (1.0 / len(terms))
            if not np.isfinite(float(total.data)):
                if last_good is not None:
                    save_checkpoint(last_good, os.path.join(out_dir, "pretrained.json"))
                raise NonFiniteLossError(
                    f"pretraining diverged at epoch {epoch}; last good checkpoint saved")
            total.backward()
            opt.step()
            losses.append(float(total.data))
        last_epoch = epoch == start_epoch + cfg.pretrain_epochs - 1
        if val_scenes and (last_epoch or epoch % PRETRAIN_EVAL_EVERY == 0):
            val_ap = evaluate_ap(val_scenes, student, cfg.detector)
        else:
            val_ap = -1.0  # not measured this epoch
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "val_ap": val_ap})
        last_good = student.clone(requires_grad=True)
    if calib_scenes:
        calibrate_dims(student, calib_scenes, cfg.detector)
    save_checkpoint(student, os.path.join(out_dir, "pretrained.json"))
    _write_history(os.path.join(out_dir, "pretrain_history.csv"), history,
                   ["epoch", "loss", "val_ap"])
    return student, history


HISTORY_FIELDS = ["epoch", "L_source", "L_pt_cls", "L_pt_box", "L_ins_cls",
                  "L_ins_box", "student_val_ap", "teacher_val_ap"]


def adapt(source_scenes, target_scenes, target_val, pretrained: ModelState,
          cfg: TrainConfig, out_dir, step_hook=None, eval_every=1):
    """Full mean-teacher adaptation loop; returns (student, teacher, history).

    eval_every controls the cadence of per-epoch validation AP (0 disables it
    except for the final epoch); skipping it roughly halves wall time for
    runs that only need final metrics.
    """
    os.makedirs(out_dir, exist_ok=True)
    student = pretrained.clone(requires_grad=True)
    teacher = pretrained.clone(requires_grad=False)
    opt = Adam(student.params, lr=cfg.lr)
    history = []
    ns = len(source_scenes)
    bs = cfg.adapt_batch_size
    step = 0
    for epoch in range(cfg.adapt_epochs):
        order_s = stream(cfg.seed, "adapt_src_order", epoch).permutation(ns)
        # target scenes resampled to match the number of source scenes
        order_t = stream(cfg.seed, "adapt_tgt_order", epoch).choice(
            len(target_scenes), size=ns, replace=len(target_scenes) < ns)
        sums = {k: 0.0 for k in LOSS_NAMES}
        nb = 0
        for b0 in range(0, ns, bs):
            src = [source_scenes[i] for i in order_s[b0:b0 + bs]]
            tgt = [target_scenes[i] for i in order_t[b0:b0 + bs]]
            rngs = {name: stream(cfg.seed, f"adapt_{name}", step)
                    for name in ("sample", "h", "xi_s", "xi_t", "src_sample",
                                 "src_aug")}
            rec = train_step(src, tgt, student, teacher, opt, cfg, rngs,
                             step_hook=step_hook)
            for k in LOSS_NAMES:
                sums[k] += rec[k]
            nb += 1
            step += 1
        row = {"epoch": epoch, **{k: sums[k] / max(nb, 1) for k in LOSS_NAMES}}
        measure = target_val and (
            epoch == cfg.adapt_epochs - 1
            or (eval_every and epoch % eval_every == 0))
        row["student_val_ap"] = evaluate_ap(target_val, student, cfg.detector) \
            if measure else -1.0
        row["teacher_val_ap"] = evaluate_ap(target_val, teacher, cfg.detector) \
            if measure else -1.0
        history.append(row)
    save_checkpoint(student, os.path.join(out_dir, "student.json"))
    save_checkpoint(teacher, os.path.join(out_dir, "teacher.json"))
    _write_history(os.path.join(out_dir, "adapt_history.csv"), history,
                   HISTORY_FIELDS)
    return student, teacher, history
