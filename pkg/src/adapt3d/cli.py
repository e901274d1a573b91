"""Command-line surface: data generation, pretraining, adaptation, evaluation
and the one-shot reproduction battery.

Every command derives all randomness from `--seed`, validates its
configuration before touching the filesystem, and writes a run manifest into
its output directory on completion (atomically, via rename).
"""

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import TrainConfig, apply_overrides, load_config, save_config
from .detector import load_checkpoint
from .metrics import Detection, build_report, full_report
from .rng import child_seed
from .scenes import (DomainProfile, gen_scene, load_manifest, load_split,
                     make_benchmark, profile_from_dict)
from .training import adapt as run_adapt
from .training import evaluate_ap, pretrain as run_pretrain

DEFAULT_SOURCE = DomainProfile()
DEFAULT_TARGET = DomainProfile(dim_mean=(4.8, 2.1, 1.8), shell_outlier_prob=0.0)
DEFAULT_COUNTS = (24, 10, 24, 12)
CALIB_SCENES = 10  # held-out labeled source scenes for the size calibration


def _calibration_scenes(profile, dataset_seed, count=CALIB_SCENES):
    """Extra labeled source scenes, disjoint from every dataset split."""
    return [gen_scene(profile, child_seed(dataset_seed, "calibration", i),
                      domain_tag="source") for i in range(count)]


def _write_manifest(out_dir, command, seed, config_path, outputs, failures,
                    started):
    manifest = {
        "command": command,
        "config": config_path,
        "seed": seed,
        "version": __version__,
        "started": started,
        "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": outputs,
        "failures": failures,
    }
    tmp = os.path.join(out_dir, ".run_manifest.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "run_manifest.json"))
    return manifest


def _load_cfg(args):
    cfg = TrainConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "no_ema", False):
        cfg.ema_enabled = False
    if getattr(args, "no_bn_sync", False):
        cfg.bn_sync_enabled = False
    if getattr(args, "loss_mask", None):
        cfg.loss_mask = tuple(p.strip() for p in args.loss_mask.split(",") if p.strip())
    if getattr(args, "matching", None):
        cfg.matching = args.matching
    cfg.validate()
    return cfg


def _profile_from_args(prefix, args, default):
    overrides = getattr(args, f"{prefix}_dims", None)
    if not overrides:
        return default
    parts = [float(v) for v in overrides.replace(",", " ").split()]
    if len(parts) != 3 or min(parts) <= 0:
        raise SystemExit(f"--{prefix}-dims expects three positive values")
    return dataclasses.replace(default, dim_mean=tuple(parts))


def cmd_gen(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    src = _profile_from_args("source", args, DEFAULT_SOURCE)
    tgt = _profile_from_args("target", args, DEFAULT_TARGET)
    if args.equal_profiles:
        tgt = dataclasses.replace(tgt, dim_mean=src.dim_mean)
    counts = tuple(args.counts) if args.counts else DEFAULT_COUNTS
    src.validate()
    tgt.validate()
    make_benchmark(src, tgt, counts, args.seed, args.out, overwrite=args.overwrite)
    _write_manifest(args.out, "gen", args.seed, args.config,
                    {"dataset": args.out}, [], started)
    return 0


def cmd_pretrain(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg = _load_cfg(args)
    manifest = load_manifest(args.dataset)  # validate before writing anything
    train = load_split(args.dataset, "source_train")
    val = load_split(args.dataset, "source_val")
    calib = _calibration_scenes(profile_from_dict(manifest["profiles"]["source"]),
                                manifest["seed"])
    os.makedirs(args.out, exist_ok=True)
    run_pretrain(train, val, cfg, args.out, calib_scenes=calib)
    _write_manifest(args.out, "pretrain", cfg.seed, args.config,
                    {"checkpoint": os.path.join(args.out, "pretrained.json")},
                    [], started)
    return 0


def cmd_adapt(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg = _load_cfg(args)
    if not os.path.exists(args.checkpoint):
        raise SystemExit(f"checkpoint {args.checkpoint} not found: "
                         "run the pretrain command first")
    pretrained = load_checkpoint(args.checkpoint)
    src = load_split(args.dataset, "source_train")
    tgt = load_split(args.dataset, "target_train")
    val = load_split(args.dataset, "target_val")
    os.makedirs(args.out, exist_ok=True)
    run_adapt(src, tgt, val, pretrained, cfg, args.out)
    _write_manifest(args.out, "adapt", cfg.seed, args.config,
                    {"student": os.path.join(args.out, "student.json"),
                     "teacher": os.path.join(args.out, "teacher.json"),
                     "history": os.path.join(args.out, "adapt_history.csv")},
                    [], started)
    return 0


def _eval_checkpoint(ckpt_path, dataset, split, cfg):
    from .detector import detect
    state = load_checkpoint(ckpt_path)
    scenes = load_split(dataset, split)
    if any(not sc.gt_boxes for sc in scenes):
        raise SystemExit(f"split {split} has unlabeled scenes; evaluation refused")
    dets, gts = [], {}
    for i, sc in enumerate(scenes):
        boxes, scores = detect(sc, state, cfg.detector, sample_seed=sc.seed)
        dets.extend(Detection(box=b, score=float(s), scene_id=i)
                    for b, s in zip(boxes, scores))
        gts[i] = sc.gt_boxes
    return full_report(dets, gts), dets, gts


def cmd_eval(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg = _load_cfg(args)
    report, dets, gts = _eval_checkpoint(args.checkpoint, args.dataset,
                                         args.split, cfg)
    os.makedirs(args.out, exist_ok=True)
    rec = {"ap": report.ap, "ate": report.ate, "ase": report.ase,
           "aoe": report.aoe}
    dims_samples = {}
    if args.emit_dims and dets:
        dims_samples["predictions"] = np.stack([d.box.dims for d in dets])
        dims_samples["ground_truth"] = np.stack(
            [b.dims for v in gts.values() for b in v])
    curves = {"pr": list(zip(report.recall.tolist(), report.precision.tolist()))}
    build_report({args.split: rec}, args.out, dims_samples=dims_samples,
                 curves=curves)
    _write_manifest(args.out, "eval", cfg.seed, args.config,
                    {"metrics": os.path.join(args.out, "metrics.csv")}, [], started)
    print(f"ap={report.ap:.4f} ate={report.ate:.4f} "
          f"ase={report.ase:.4f} aoe={report.aoe:.4f}")
    return 0


def run_repro(out_dir, seed, cfg=None):
    """The full experiment battery; stage failures are recorded, not fatal."""
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg = cfg if cfg is not None else TrainConfig()
    cfg.seed = seed
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "run_config.txt"))
    failures = []
    runs = {}
    curves = {}
    dims_samples = {}

    dataset = os.path.join(out_dir, "dataset")
    dataset_seed = child_seed(seed, "dataset")
    try:
        make_benchmark(DEFAULT_SOURCE, DEFAULT_TARGET, DEFAULT_COUNTS,
                       dataset_seed, dataset, overwrite=True)
    except Exception as e:  # noqa: BLE001 - battery must continue
        failures.append(f"gen: {e}")
        _write_manifest(out_dir, "repro", seed, None, {}, failures, started)
        return 1

    src_train = load_split(dataset, "source_train")
    src_val = load_split(dataset, "source_val")
    tgt_train = load_split(dataset, "target_train")
    tgt_val_scenes = load_split(dataset, "target_val")
    tgt_val_gts = {i: sc.gt_boxes for i, sc in enumerate(tgt_val_scenes)}

    pre_dir = os.path.join(out_dir, "pretrain")
    try:
        pretrained, _ = run_pretrain(
            src_train, src_val, cfg, pre_dir,
            calib_scenes=_calibration_scenes(DEFAULT_SOURCE, dataset_seed))
    except Exception as e:  # noqa: BLE001
        failures.append(f"pretrain: {e}")
        _write_manifest(out_dir, "repro", seed, None, {}, failures, started)
        return 1

    def eval_state(state, scenes, name):
        from .detector import detect
        dets, gts = [], {}
        for i, sc in enumerate(scenes):
            boxes, scores = detect(sc, state, cfg.detector, sample_seed=sc.seed)
            dets.extend(Detection(box=b, score=float(s), scene_id=i)
                        for b, s in zip(boxes, scores))
            gts[i] = sc.gt_boxes
        rep = full_report(dets, gts)
        runs[name] = {"ap": rep.ap, "ate": rep.ate, "ase": rep.ase, "aoe": rep.aoe}
        if dets:
            dims_samples[name] = np.stack([d.box.dims for d in dets])
        return rep

    eval_state(pretrained, src_val, "pretrain_source_val")
    eval_state(pretrained, tgt_val_scenes, "direct_transfer_target_val")
    if "ground_truth" not in dims_samples:
        dims_samples["ground_truth"] = np.stack(
            [b.dims for v in tgt_val_gts.values() for b in v])

    variants = {
        "adapt_default": {},
        "adapt_no_ema": {"ema_enabled": False},
        "adapt_no_bn_sync": {"bn_sync_enabled": False},
        "adapt_cls_only": {"loss_mask": ("pt_cls", "ins_cls")},
        "adapt_box_only": {"loss_mask": ("pt_box", "ins_box")},
        "adapt_nearest_point": {"matching": "nearest-point"},
        "adapt_max_iou_box": {"matching": "max-iou-box"},
    }
    for name, overrides in variants.items():
        vcfg = dataclasses.replace(cfg, **overrides)
        try:
            student, teacher, history = run_adapt(
                src_train, tgt_train, tgt_val_scenes, pretrained, vcfg,
                os.path.join(out_dir, name))
            eval_state(teacher, tgt_val_scenes, f"{name}_teacher")
            if name == "adapt_default":
                eval_state(student, tgt_val_scenes, "adapt_default_student")
                curves["student_val_ap"] = [(r["epoch"], r["student_val_ap"])
                                            for r in history]
                curves["teacher_val_ap"] = [(r["epoch"], r["teacher_val_ap"])
                                            for r in history]
        except Exception as e:  # noqa: BLE001
            failures.append(f"{name}: {e}")

    report_dir = os.path.join(out_dir, "report")
    build_report(runs, report_dir, dims_samples=dims_samples, curves=curves)
    _write_manifest(out_dir, "repro", seed, None,
                    {"report": report_dir, "dataset": dataset}, failures, started)
    return 1 if failures else 0


def cmd_repro(args):
    cfg = TrainConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    return run_repro(args.out, args.seed if args.seed is not None else cfg.seed,
                     cfg=cfg)


def build_parser():
    p = argparse.ArgumentParser(prog="adapt3d",
                                description="Synthetic-benchmark domain-adaptive "
                                            "3D detection toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--threads", type=int, default=1)

    g = sub.add_parser("gen", help="generate a dataset bundle")
    common(g)
    g.add_argument("--counts", type=int, nargs=4, metavar=("ST", "SV", "TT", "TV"))
    g.add_argument("--source-dims", default=None)
    g.add_argument("--target-dims", default=None)
    g.add_argument("--equal-profiles", action="store_true",
                   help="no-gap control: target copies the source dims")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen, seed=0)

    t = sub.add_parser("pretrain", help="supervised source training")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="mean-teacher consistency adaptation")
    common(a)
    a.add_argument("--dataset", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--no-ema", action="store_true")
    a.add_argument("--no-bn-sync", action="store_true")
    a.add_argument("--loss-mask", default=None,
                   help="comma list out of pt_cls,pt_box,ins_cls,ins_box")
    a.add_argument("--matching", default=None,
                   choices=["shared", "nearest-point", "max-iou-box"])
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="target_val")
    e.add_argument("--emit-dims", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("repro", help="one-shot experiment battery")
    common(r)
    r.set_defaults(func=cmd_repro, seed=7)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is None and not getattr(args, "config", None):
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
