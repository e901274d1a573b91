"""Run configuration dataclasses and the key = value config file format."""

import dataclasses
from dataclasses import dataclass, field


@dataclass
class DetectorConfig:
    """Architecture and decoding constants of the two-stage point detector."""
    anchor_dims: tuple = (3.9, 1.6, 1.5)  # reference dims for residual encoding
    k_neighbors: int = 8
    sample_m: int = 128  # points sampled per scene (shared student/teacher)
    rpn_nms_thresh: float = 0.4
    rpn_min_score: float = 0.1
    proposal_cap: int = 12
    final_nms_thresh: float = 0.25
    final_min_score: float = 0.2
    roi_enlarge: float = 1.2  # gather enlargement for stage-2 pooling
    min_pool_points: int = 4  # below this a proposal emits sentinel outputs
    stage2_pos_iou: float = 0.55
    refine_rounds: int = 2  # refinement passes at inference (cascade)
    # training-time foreground assignment counts points within this enlargement
    # of a gt box as object returns: real annotations are tight while returns
    # (mirrors, open doors, sensor bloom) spill past the labeled extent
    fg_enlarge: float = 2.0


@dataclass
class TrainConfig:
    """Hyperparameters of source pretraining and consistency adaptation."""
    momentum: float = 0.99          # EMA momentum m
    bn_momentum: float = 0.05       # BN momentum alpha
    source_weight: float = 0.1      # lambda on the supervised loss
    prob_threshold: float = 0.99    # epsilon gating instance box consistency
    h_range: tuple = (0.9, 1.1)     # target-domain global scaling range
    roi_scale_range: tuple = (0.9, 1.1)
    roi_center_frac: float = 0.05
    roi_yaw_range: float = 0.05
    pretrain_scale_range: tuple = (0.7, 1.3)
    lr: float = 1e-4
    pretrain_lr: float = 2e-3
    batch_size: int = 4
    # adaptation steps per scene pair: at the low adaptation learning rate the
    # drift toward target statistics is step-count bound, and frequent EMA
    # updates keep the teacher close enough to the student to bootstrap
    adapt_batch_size: int = 1
    pretrain_epochs: int = 60
    adapt_epochs: int = 40
    seed: int = 0
    # ablation switches
    ema_enabled: bool = True
    bn_sync_enabled: bool = True
    loss_mask: tuple = ("pt_cls", "pt_box", "ins_cls", "ins_box")
    matching: str = "shared"  # shared | nearest-point | max-iou-box
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self):
        if not (0.0 < self.momentum <= 1.0):
            raise ValueError(f"momentum {self.momentum} outside (0, 1]")
        if not (0.0 < self.bn_momentum <= 1.0):
            raise ValueError(f"bn_momentum {self.bn_momentum} outside (0, 1]")
        if not (0.0 < self.prob_threshold < 1.0):
            raise ValueError(f"prob_threshold {self.prob_threshold} outside (0, 1)")
        if self.h_range[0] <= 0 or self.h_range[0] > self.h_range[1]:
            raise ValueError(f"invalid h_range {self.h_range}")
        if self.batch_size < 1 or self.adapt_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.matching not in ("shared", "nearest-point", "max-iou-box"):
            raise ValueError(f"unknown matching mode {self.matching!r}")
        for name in self.loss_mask:
            if name not in ("pt_cls", "pt_box", "ins_cls", "ins_box"):
                raise ValueError(f"unknown loss component {name!r}")


def _parse_value(raw, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = current[0] if current else 1.0
        return tuple(type(elem)(p) if not isinstance(elem, str) else p for p in parts)
    return raw


def apply_overrides(cfg, overrides):
    """Apply {key: raw-string} overrides; dotted keys reach the detector block."""
    for key, raw in overrides.items():
        target = cfg
        name = key
        if key.startswith("detector."):
            target, name = cfg.detector, key.split(".", 1)[1]
        if not hasattr(target, name):
            raise ValueError(f"unknown config field {key!r}")
        setattr(target, name, _parse_value(raw, getattr(target, name)))
    cfg.validate()
    return cfg


def load_config(path, base=None):
    """Read a `key = value` file (with # comments) into a TrainConfig."""
    cfg = base if base is not None else TrainConfig()
    overrides = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, raw = line.split("=", 1)
            overrides[key.strip()] = raw
    return apply_overrides(cfg, overrides)


def save_config(cfg: TrainConfig, path):
    lines = []
    for f_ in dataclasses.fields(cfg):
        if f_.name == "detector":
            continue
        v = getattr(cfg, f_.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f_.name} = {v}")
    for f_ in dataclasses.fields(cfg.detector):
        v = getattr(cfg.detector, f_.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"detector.{f_.name} = {v}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
