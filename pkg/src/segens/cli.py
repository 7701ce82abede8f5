"""Command-line front end.

Subcommands: gen-data, train-base, train-meta, distill, eval, ablate, report.
Every command is deterministic under (--seed, config), writes its artifacts
under --out, and drops a run.json provenance record (config snapshot, seed,
output hashes) next to them.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import glob
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import synthdata, nets, metrics
from .synthdata import (ROLES, MSCD_LIKE, EVAL_KINDS, DEFAULT_SPLIT, make_binary_dataset,
                        make_multiclass_eval_set, make_unlabeled_images, split_dataset,
                        save_dataset_dir, load_dataset_dir)
from .nets import ModelSpec, build, save_checkpoint, load_checkpoint, checkpoint_hash, flops_count
from .ensemble import (ABE, STRATEGIES, TRAINABLE_STRATEGIES, EnsembleManifest, Teacher,
                       FusionStrategy, build_meta, train_meta, teacher_forward, stack_bases)
from .distill import DistillConfig, distill_student, agreement
from .train import TrainConfig, fit, predict_batched, snapshot_params, restore_params, NumericError
from .tensor import bce_loss
from .metrics import ConfusionAccumulator, iou_per_class, miou, fwiou, write_metrics_csv


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# experiment configuration (strict: unknown keys are rejected)
# ---------------------------------------------------------------------------

DEFAULT_ROLE_CLASS_MAP = {"C_c_E": 1, "C_c_L": 1, "C_nl": 0, "W_k": 0, "W_bl": 0, "S_bs": 0}
DEFAULT_BASE_SEQUENCE = ["C_c_E", "C_c_L", "W_k", "C_nl", "S_bs", "W_bl"]


@dataclass
class DatasetBlock:
    kind: str = MSCD_LIKE
    n_images: int = 80
    hw: tuple = (64, 64)
    binary_n_images: int = synthdata.ROLE_DEFAULT_IMAGES
    unlabeled_n_images: int = 80


@dataclass
class ModelBlock:
    arch: str = nets.SEGNET
    depth: int = 3
    base_width: int = 16


@dataclass
class EnsembleBlock:
    roles: tuple = ("C_c_E", "C_c_L")
    strategy: str = "MUNE"
    role_class_map: dict = field(default_factory=lambda: dict(DEFAULT_ROLE_CLASS_MAP))
    classes: tuple = ("non_canola", "canola")
    meta_depth: int = 2
    meta_width: int = 16


@dataclass
class TrainBlock:
    epochs: int = 30
    lr: float = 0.001
    batch: int = 2
    split: tuple = DEFAULT_SPLIT


@dataclass
class DistillBlock:
    epochs: int = 30
    soft_targets: bool = True


@dataclass
class AblationBlock:
    base_sequence: tuple = tuple(DEFAULT_BASE_SEQUENCE)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    ensemble: EnsembleBlock = field(default_factory=EnsembleBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    distill: DistillBlock = field(default_factory=DistillBlock)
    ablation: AblationBlock = field(default_factory=AblationBlock)


_BLOCKS = {"dataset": DatasetBlock, "model": ModelBlock, "ensemble": EnsembleBlock,
           "train": TrainBlock, "distill": DistillBlock, "ablation": AblationBlock}


def _parse_block(cls, raw, where):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) under {where!r}: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) and k != "base_sequence" else
               (tuple(v) if k == "base_sequence" else v) for k, v in raw.items()}
    return cls(**coerced)


def parse_config(raw: dict) -> ExperimentConfig:
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _BLOCKS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _parse_block(_BLOCKS[key], value, key)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: ExperimentConfig):
    if cfg.dataset.kind not in EVAL_KINDS:
        raise ConfigError(f"dataset.kind must be one of {EVAL_KINDS}, got {cfg.dataset.kind!r}")
    if cfg.model.arch not in (nets.SEGNET, nets.UNET):
        raise ConfigError(f"model.arch must be SEGNET or UNET, got {cfg.model.arch!r}")
    if cfg.ensemble.strategy not in STRATEGIES:
        raise ConfigError(f"ensemble.strategy must be one of {STRATEGIES}, "
                          f"got {cfg.ensemble.strategy!r}")
    for role in list(cfg.ensemble.roles) + list(cfg.ablation.base_sequence):
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}; valid roles: {', '.join(ROLES)}")
    for role, cls_idx in cfg.ensemble.role_class_map.items():
        if role not in ROLES:
            raise ConfigError(f"role_class_map: unknown role {role!r}")
        if not 0 <= int(cls_idx) < len(cfg.ensemble.classes):
            raise ConfigError(f"role_class_map[{role!r}] = {cls_idx} outside "
                              f"[0, {len(cfg.ensemble.classes)})")
    if abs(sum(cfg.train.split) - 1.0) > 1e-9 or len(cfg.train.split) != 3:
        raise ConfigError(f"train.split must be three fractions summing to 1, got {cfg.train.split}")


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------

def _write_run_record(out_dir, command, args, cfg, outputs):
    record = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": cfg.seed,
        "config": asdict(cfg),
        "outputs": {os.path.relpath(p, out_dir): checkpoint_hash(p) for p in outputs},
    }
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(record, f, indent=2, default=list)


def _setup(args, command):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out if args.out else os.path.join(cfg.out, command)
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir


def _eval_sets(cfg):
    return make_multiclass_eval_set(cfg.dataset.kind, cfg.dataset.n_images, cfg.seed,
                                    cfg.dataset.hw, cfg.train.split)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg, out_dir = _setup(args, "gen-data")
    sets = _eval_sets(cfg)
    save_dataset_dir(out_dir, sets, {"kind": cfg.dataset.kind, "seed": cfg.seed,
                                     "hw": list(cfg.dataset.hw),
                                     "n_images": cfg.dataset.n_images})
    outputs = sorted(glob.glob(os.path.join(out_dir, "*", "*.p?m")))
    for split in ("train", "val", "test"):
        print(f"{split}: {len(sets[split])} image/mask pairs")
    _write_run_record(out_dir, "gen-data", args, cfg, outputs)
    print(f"dataset written to {out_dir}")
    return 0


def _binary_val_iou(net, images, masks):
    pred = (predict_batched(net, images)[:, 0] >= 0.5).astype(np.int64)
    acc = ConfusionAccumulator(2)
    acc.update(pred, masks)
    return float(iou_per_class(acc)[1])


def cmd_train_base(args) -> int:
    if args.role not in ROLES:
        raise ConfigError(f"unknown role {args.role!r}; valid roles: {', '.join(ROLES)}")
    cfg, out_dir = _setup(args, "train-base")
    ds = make_binary_dataset(args.role, cfg.dataset.binary_n_images, cfg.seed, cfg.dataset.hw)
    splits = split_dataset(ds, cfg.seed + 1, cfg.train.split)
    spec = ModelSpec(cfg.model.arch, 3, 1, cfg.model.depth, cfg.model.base_width,
                     seed=cfg.seed + 10 + ROLES.index(args.role))
    net = build(spec)

    def make_loss(n, xb, yb):
        return bce_loss(yb[:, None, :, :].astype(np.float32), n.forward(xb))

    best = {"iou": -1.0, "params": snapshot_params(net)}

    def on_epoch(n, epoch):
        val = _binary_val_iou(n, splits["val"].images, splits["val"].masks)
        if val > best["iou"]:
            best.update(iou=val, params=snapshot_params(n))
        return {"val_iou": val}

    tc = TrainConfig(cfg.train.epochs, cfg.train.lr, cfg.train.batch, seed=cfg.seed + 2)
    history = fit(net, splits["train"].images, splits["train"].masks, make_loss, tc,
                  on_epoch=on_epoch)
    restore_params(net, best["params"])

    ckpt = os.path.join(out_dir, f"{args.role}.ckpt")
    save_checkpoint(net, ckpt)
    log = os.path.join(out_dir, f"{args.role}_train_log.csv")
    with open(log, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "val_iou"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['val_iou']:.4f}"])
    _write_run_record(out_dir, "train-base", args, cfg, [ckpt, log])
    print(f"{args.role}: best val IOU {best['iou']:.4f}; checkpoint {ckpt}")
    return 0


def _load_or_create_manifest(args, cfg) -> tuple:
    path = args.manifest
    if os.path.exists(path):
        return EnsembleManifest.load(path), path
    if not args.bases:
        raise DataError(f"manifest not found: {path} (pass --bases DIR to create one from "
                        "trained base checkpoints)")
    manifest_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(manifest_dir, exist_ok=True)
    entries = []
    for role in cfg.ensemble.roles:
        ckpt = os.path.join(args.bases, f"{role}.ckpt")
        if not os.path.exists(ckpt):
            raise DataError(f"missing base checkpoint for role {role}: {ckpt}")
        entries.append({"role": role,
                        "checkpoint": os.path.relpath(os.path.abspath(ckpt), manifest_dir),
                        "class_index": int(cfg.ensemble.role_class_map.get(role, 0))})
    manifest = EnsembleManifest(strategy=cfg.ensemble.strategy, classes=list(cfg.ensemble.classes),
                                bases=entries).validate()
    manifest.save(path)
    return manifest, path


def _load_bases(manifest: EnsembleManifest, manifest_dir: str):
    bases, hashes = [], {}
    for entry in manifest.bases:
        path = os.path.join(manifest_dir, entry["checkpoint"])
        if not os.path.exists(path):
            raise DataError(f"missing base checkpoint for role {entry['role']}: {path}")
        net = load_checkpoint(path)
        net.freeze()
        bases.append((entry["role"], net))
        hashes[path] = checkpoint_hash(path)
    return bases, hashes


def _accumulate(pred_maps, gt_maps, k) -> ConfusionAccumulator:
    acc = ConfusionAccumulator(k)
    acc.update(pred_maps, gt_maps)
    return acc


def cmd_train_meta(args) -> int:
    if args.strategy == ABE:
        raise ConfigError("ABE is rule-based (hard argmax) and cannot be trained; "
                          f"valid strategies: {', '.join(TRAINABLE_STRATEGIES)}")
    if args.strategy not in TRAINABLE_STRATEGIES:
        raise ConfigError(f"unknown strategy {args.strategy!r}; "
                          f"valid: {', '.join(TRAINABLE_STRATEGIES)}")
    cfg, out_dir = _setup(args, "train-meta")
    manifest, manifest_path = _load_or_create_manifest(args, cfg)
    manifest_dir = os.path.dirname(os.path.abspath(manifest_path)) or "."
    bases, hashes_before = _load_bases(manifest, manifest_dir)
    class_of_role = [int(e["class_index"]) for e in manifest.bases]
    k = len(manifest.classes)

    sets = _eval_sets(cfg)
    strategy = build_meta(args.strategy, len(bases), k, seed=cfg.seed + 77,
                          depth=cfg.ensemble.meta_depth, base_width=cfg.ensemble.meta_width)
    tc = TrainConfig(cfg.train.epochs, cfg.train.lr, cfg.train.batch, seed=cfg.seed + 3)
    history = train_meta(strategy, bases, sets["train"], sets["val"], tc)

    meta_ckpt = os.path.join(out_dir, f"meta_{args.strategy}.ckpt")
    save_checkpoint(strategy.meta_net, meta_ckpt)
    manifest.strategy = args.strategy
    manifest.meta_checkpoint = os.path.relpath(os.path.abspath(meta_ckpt), manifest_dir)
    manifest.meta_role_order = list(strategy.role_order)
    manifest.save(manifest_path)

    # metrics table: each base binarized through its class mapping, ABE, trained head
    test = sets["test"]
    rows = []
    for (role, net), cls_idx in zip(bases, class_of_role):
        fg = predict_batched(net, test.images)[:, 0] >= 0.5
        pred = np.where(fg, cls_idx, 0)
        rows.append((f"beta_{role}", _accumulate(pred, test.masks, k)))
    abe_pred = teacher_forward(FusionStrategy(ABE), bases, test.images, class_of_role, k)
    rows.append((ABE, _accumulate(abe_pred.class_map, test.masks, k)))
    meta_pred = teacher_forward(strategy, bases, test.images, class_of_role, k)
    rows.append((args.strategy, _accumulate(meta_pred.class_map, test.masks, k)))
    metrics_csv = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_csv, rows, test.class_names)

    log = os.path.join(out_dir, "train_log.csv")
    with open(log, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "val_miou"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['val_miou']:.4f}"])

    for path, before in hashes_before.items():
        if checkpoint_hash(path) != before:
            raise RuntimeError(f"base checkpoint changed during fusion training: {path}")

    _write_run_record(out_dir, "train-meta", args, cfg, [meta_ckpt, metrics_csv, log])
    for name, acc in rows:
        print(f"{name}: fwIOU {fwiou(acc):.4f} mIOU {miou(acc):.4f}")
    print(f"meta checkpoint {meta_ckpt}; manifest updated at {manifest_path}")
    return 0


def _warm_start(student, base_net):
    """Copy every parameter whose name and shape match (the head usually
    differs: binary base vs multi-class student)."""
    base_params = dict(base_net.named_parameters())
    for name, p in student.named_parameters():
        src = base_params.get(name)
        if src is not None and src.data.shape == p.data.shape:
            p.data = src.data.copy().astype(p.data.dtype)
    return student


def cmd_distill(args) -> int:
    cfg, out_dir = _setup(args, "distill")
    if not os.path.exists(args.manifest):
        raise DataError(f"manifest not found: {args.manifest}")
    manifest = EnsembleManifest.load(args.manifest)
    manifest_dir = os.path.dirname(os.path.abspath(args.manifest)) or "."
    teacher = Teacher.from_manifest(manifest, manifest_dir)
    hashes_before = {}
    for entry in manifest.bases:
        p = os.path.join(manifest_dir, entry["checkpoint"])
        hashes_before[p] = checkpoint_hash(p)
    if manifest.meta_checkpoint:
        p = os.path.join(manifest_dir, manifest.meta_checkpoint)
        hashes_before[p] = checkpoint_hash(p)

    hw = cfg.dataset.hw
    unlabeled = make_unlabeled_images(cfg.dataset.kind, cfg.dataset.unlabeled_n_images,
                                      cfg.seed + 5, hw)
    holdout = _eval_sets(cfg)["test"].images

    spec = ModelSpec(cfg.model.arch, 3, teacher.k, cfg.model.depth, cfg.model.base_width,
                     seed=cfg.seed + 99)
    init = None
    if args.init_from:
        if not os.path.exists(args.init_from):
            raise DataError(f"warm-start checkpoint not found: {args.init_from}")
        init = _warm_start(build(spec), load_checkpoint(args.init_from))

    epochs = cfg.distill.epochs if args.epochs is None else args.epochs
    dcfg = DistillConfig(spec, soft_targets=cfg.distill.soft_targets,
                         train=TrainConfig(epochs, cfg.train.lr, cfg.train.batch,
                                           seed=cfg.seed + 4))
    student, history = distill_student(teacher, unlabeled, dcfg, init_from=init, holdout=holdout)
    final_agreement = history[-1]["agreement"] if history else agreement(student, teacher, holdout)

    student_ckpt = os.path.join(out_dir, "student.ckpt")
    save_checkpoint(student, student_ckpt)
    report_csv = os.path.join(out_dir, "distill_report.csv")
    with open(report_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "distill_loss", "agreement", "seconds"])
        if not history:
            writer.writerow([0, "", f"{final_agreement:.4f}", "0.00"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['loss']:.6f}",
                             f"{row['agreement']:.4f}", f"{row['seconds']:.2f}"])

    student_flops = flops_count(student, hw)
    teacher_flops = teacher.flops(hw)
    summary = {"agreement": final_agreement, "student_flops": student_flops,
               "teacher_flops": teacher_flops, "speedup": teacher_flops / student_flops}
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2)

    for path, before in hashes_before.items():
        if checkpoint_hash(path) != before:
            raise RuntimeError(f"teacher checkpoint changed during distillation: {path}")

    _write_run_record(out_dir, "distill", args, cfg, [student_ckpt, report_csv, summary_path])
    print(f"agreement {final_agreement:.4f}; student FLOPs {student_flops:,} vs "
          f"teacher {teacher_flops:,} (x{summary['speedup']:.2f})")
    return 0


def cmd_eval(args) -> int:
    cfg, out_dir = _setup(args, "eval")
    if bool(args.checkpoint) == bool(args.manifest):
        raise ConfigError("eval needs exactly one of --checkpoint or --manifest")
    if not os.path.isdir(args.dataset):
        raise DataError(f"dataset directory not found: {args.dataset}")
    try:
        ds = load_dataset_dir(args.dataset, args.split)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    k = len(ds.class_names)

    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise DataError(f"checkpoint not found: {args.checkpoint}")
        net = load_checkpoint(args.checkpoint)
        out = predict_batched(net, ds.images)
        if net.spec.out_channels == 1:
            if k != 2:
                raise ConfigError(f"binary checkpoint against a {k}-class dataset")
            pred = (out[:, 0] >= 0.5).astype(np.int64)
        elif net.spec.out_channels == k:
            pred = out.argmax(axis=1)
        else:
            raise ConfigError(f"checkpoint emits {net.spec.out_channels} channels, "
                              f"dataset has {k} classes")
        name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    else:
        if not os.path.exists(args.manifest):
            raise DataError(f"manifest not found: {args.manifest}")
        teacher = Teacher.from_manifest_path(args.manifest)
        if teacher.k != k:
            raise ConfigError(f"teacher has {teacher.k} classes, dataset has {k}")
        pred = teacher.predict(ds.images).class_map
        name = teacher.strategy.kind

    acc = _accumulate(pred, ds.masks, k)
    metrics_csv = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_csv, [(name, acc)], ds.class_names)
    _write_run_record(out_dir, "eval", args, cfg, [metrics_csv])
    print(f"{name}: fwIOU {fwiou(acc):.4f} mIOU {miou(acc):.4f} "
          + " ".join(f"IOU_{c} {v:.4f}" for c, v in zip(ds.class_names, iou_per_class(acc))))
    return 0


def _ablate_one(meta_stub, stacks, labels, k, tc):
    """Train one fusion net on pre-sliced stacks; returns test metrics."""
    strategy, n_models = meta_stub
    meta = strategy.meta_net

    def make_loss(net, xb, yb):
        from .tensor import cce_loss
        return cce_loss(net.forward(xb), yb)

    best = {"miou": -1.0, "params": snapshot_params(meta)}

    def on_epoch(net, epoch):
        logits = predict_batched(net, stacks["val"])
        acc = _accumulate(logits.argmax(axis=1), labels["val"], k)
        val = miou(acc)
        if val > best["miou"]:
            best.update(miou=val, params=snapshot_params(net))
        return {"val_miou": val}

    fit(meta, stacks["train"], labels["train"], make_loss, tc, on_epoch=on_epoch)
    restore_params(meta, best["params"])
    logits = predict_batched(meta, stacks["test"])
    acc = _accumulate(logits.argmax(axis=1), labels["test"], k)
    return {"fwIOU": fwiou(acc), "mIOU": miou(acc),
            "ious": iou_per_class(acc).tolist()}


def cmd_ablate(args) -> int:
    cfg, out_dir = _setup(args, "ablate")
    if not args.bases:
        raise ConfigError("ablate needs --bases DIR with one <role>.ckpt per role")
    sequence = list(cfg.ablation.base_sequence)
    if len(sequence) < 2:
        raise ConfigError("ablation.base_sequence needs at least 2 roles")
    bases = []
    for role in sequence:
        ckpt = os.path.join(args.bases, f"{role}.ckpt")
        if not os.path.exists(ckpt):
            raise DataError(f"missing base checkpoint for role {role}: {ckpt}")
        net = load_checkpoint(ckpt)
        net.freeze()
        bases.append((role, net))

    sets = _eval_sets(cfg)
    k = len(cfg.ensemble.classes)
    labels = {name: sets[name].masks for name in ("train", "val", "test")}
    full_stacks = {name: stack_bases(bases, sets[name].images).probs
                   for name in ("train", "val", "test")}

    repeats = max(1, args.repeats)
    strategy_kind = cfg.ensemble.strategy if cfg.ensemble.strategy != ABE else "MUNE"
    jobs = []
    for ci, n_models in enumerate(range(2, len(sequence) + 1), start=1):
        for rep in range(repeats):
            seed = cfg.seed + 1000 * rep + ci
            strategy = build_meta(strategy_kind, n_models, k, seed=seed,
                                  depth=cfg.ensemble.meta_depth,
                                  base_width=cfg.ensemble.meta_width)
            stacks = {name: full_stacks[name][:, :n_models] for name in full_stacks}
            tc = TrainConfig(cfg.train.epochs, cfg.train.lr, cfg.train.batch, seed=seed)
            jobs.append((ci, n_models, (strategy, n_models), stacks, tc))

    workers = max(1, int(os.environ.get("SEGENS_THREADS", "1")))
    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(ci, pool.submit(_ablate_one, stub, stacks, labels, k, tc))
                       for ci, _, stub, stacks, tc in jobs]
        for ci, fut in futures:
            results.setdefault(ci, []).append(fut.result())
    else:
        for ci, _, stub, stacks, tc in jobs:
            results.setdefault(ci, []).append(_ablate_one(stub, stacks, labels, k, tc))

    class_names = cfg.ensemble.classes
    ablation_csv = os.path.join(out_dir, "ablation.csv")
    fig_csv = os.path.join(out_dir, "miou_vs_n_models.csv")
    with open(ablation_csv, "w", newline="") as f:
        writer = csv.writer(f)
        if repeats == 1:
            writer.writerow(["config", "n_models", "roles", "fwIOU", "mIOU"]
                            + [f"IOU_{c}" for c in class_names])
        else:
            cols = ["config", "n_models", "roles"]
            for m in ["fwIOU", "mIOU"] + [f"IOU_{c}" for c in class_names]:
                cols += [f"{m}_mean", f"{m}_var"]
            writer.writerow(cols)
        fig_rows = []
        for ci in sorted(results):
            n_models = ci + 1
            roles = ";".join(sequence[:n_models])
            runs = results[ci]
            fw = np.array([r["fwIOU"] for r in runs])
            mi = np.array([r["mIOU"] for r in runs])
            per = np.array([r["ious"] for r in runs])  # (repeats, k)
            if repeats == 1:
                writer.writerow([f"M{ci}", n_models, roles, f"{fw[0]:.4f}", f"{mi[0]:.4f}"]
                                + [f"{v:.4f}" for v in per[0]])
                fig_rows.append([n_models, f"{mi[0]:.4f}"])
            else:
                row = [f"M{ci}", n_models, roles, f"{fw.mean():.4f}", f"{fw.var():.6f}",
                       f"{mi.mean():.4f}", f"{mi.var():.6f}"]
                for j in range(k):
                    row += [f"{per[:, j].mean():.4f}", f"{per[:, j].var():.6f}"]
                writer.writerow(row)
                fig_rows.append([n_models, f"{mi.mean():.4f}", f"{mi.var():.6f}"])
    with open(fig_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n_models", "mIOU"] if repeats == 1
                        else ["n_models", "mIOU_mean", "mIOU_var"])
        writer.writerows(fig_rows)

    _write_run_record(out_dir, "ablate", args, cfg, [ablation_csv, fig_csv])
    print(f"ablation table {ablation_csv}")
    return 0


def cmd_report(args) -> int:
    cfg, out_dir = _setup(args, "report")
    scan = args.dir
    if not os.path.isdir(scan):
        raise DataError(f"report directory not found: {scan}")
    csv_files = sorted(glob.glob(os.path.join(scan, "**", "*.csv"), recursive=True))
    lines = []
    for path in csv_files:
        with open(path, newline="") as f:
            table = list(csv.reader(f))
        if not table:
            continue
        lines.append(f"## {os.path.relpath(path, scan)}")
        lines.append("")
        lines.append("| " + " | ".join(table[0]) + " |")
        lines.append("|" + "---|" * len(table[0]))
        for row in table[1:]:
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    text = "\n".join(lines) if lines else "(no CSV files found)\n"
    report_path = os.path.join(out_dir, "report.md")
    with open(report_path, "w") as f:
        f.write(text)
    print(text)
    _write_run_record(out_dir, "report", args, cfg, [report_path])
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segens",
                                     description="ensemble segmentation experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="materialize the eval dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", parents=[common], help="train one binary base model")
    p.add_argument("--role", required=True, help=f"one of: {', '.join(ROLES)}")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-meta", parents=[common], help="train a fusion head over frozen bases")
    p.add_argument("--strategy", required=True)
    p.add_argument("--manifest", required=True, help="ensemble manifest JSON (created if absent)")
    p.add_argument("--bases", help="directory with <role>.ckpt files (for manifest creation)")
    p.set_defaults(func=cmd_train_meta)

    p = sub.add_parser("distill", parents=[common], help="distill a teacher into a student")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=None, help="override distill epochs")
    p.add_argument("--init-from", dest="init_from", help="warm-start student from a checkpoint")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--dataset", required=True, help="dataset directory from gen-data")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="base-count ablation sweep")
    p.add_argument("--bases", required=True, help="directory with <role>.ckpt files")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="render CSVs in a directory as markdown")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
