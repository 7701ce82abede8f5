"""Homogeneous stacking of frozen binary base models and fusion strategies.

The stack is the channel-wise concatenation of each base model's foreground
probability map, in registration order. Four fusion strategies turn a stack
into per-pixel class probabilities:

* ABE: rule-based argmax with a confidence threshold, no parameters.
* MCE: one trainable 1x1 conv.
* MSNE / MUNE: a full SEGNET / UNET fusion net over the stack.

Trainable strategies persist the role order they were trained with and
refuse a differently ordered stack instead of silently mispredicting.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .nets import ModelSpec, Network, build, load_checkpoint, flops_count
from .train import TrainConfig, fit, snapshot_params, restore_params, predict_batched
from .tensor import Tensor, cce_loss, no_grad
from .metrics import ConfusionAccumulator, miou
from .synthdata import ROLES

ABE = "ABE"
MCE = "MCE"
MSNE = "MSNE"
MUNE = "MUNE"
STRATEGIES = (ABE, MCE, MSNE, MUNE)
TRAINABLE_STRATEGIES = (MCE, MSNE, MUNE)

ROLE_DESCRIPTIONS = {
    "C_nl": "narrow leaf crops",
    "C_c_E": "early stage canola",
    "C_c_L": "mid/late stage canola",
    "W_k": "kochia weed",
    "W_bl": "broad leaf weeds",
    "S_bs": "bare soil",
}


@dataclass(frozen=True)
class BaseRole:
    id: str
    description: str = ""

    def __post_init__(self):
        if self.id not in ROLES:
            raise ValueError(f"unknown base role {self.id!r}; valid roles: {', '.join(ROLES)}")
        if not self.description:
            object.__setattr__(self, "description", ROLE_DESCRIPTIONS[self.id])


@dataclass
class BaseOutputStack:
    probs: np.ndarray   # (N, n_models, H, W) in [0, 1]
    roles: tuple


@dataclass
class TeacherPrediction:
    class_probs: np.ndarray  # (N, K, H, W), rows sum to 1
    class_map: np.ndarray    # (N, H, W) int argmax


@dataclass
class FusionStrategy:
    kind: str
    meta_net: Network = None
    role_order: tuple = None


def stack_bases(bases, batch: np.ndarray) -> BaseOutputStack:
    """Evaluate every frozen base on the batch; channel i is base i's
    sigmoid output. Registration order is preserved."""
    roles = []
    maps = []
    for role, net in bases:
        if not net.frozen:
            raise ValueError(f"base {role!r} is not frozen; freeze bases before stacking")
        if net.spec.out_channels != 1:
            raise ValueError(f"base {role!r} must have out_channels == 1, "
                             f"got {net.spec.out_channels}")
        roles.append(role)
        maps.append(predict_batched(net, batch))
    return BaseOutputStack(np.concatenate(maps, axis=1), tuple(roles))


def _one_hot(class_map: np.ndarray, k: int) -> np.ndarray:
    n, h, w = class_map.shape
    probs = np.zeros((n, k, h, w), dtype=np.float32)
    np.put_along_axis(probs, class_map[:, None].astype(np.intp), 1.0, axis=1)
    return probs


def fuse_abe(stack: BaseOutputStack, class_of_role, k_classes: int,
             threshold: float = 0.5) -> TeacherPrediction:
    """Per pixel: if the most confident base clears the threshold, take that
    base's target class (ties to the lowest channel); else background (0).
    Output probabilities are the hard one-hot of the decision."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"fuse_abe: threshold must be in [0, 1], got {threshold}")
    lut = np.asarray(class_of_role, dtype=np.int64)
    if lut.shape != (stack.probs.shape[1],):
        raise ValueError(f"fuse_abe: got {lut.size} class mappings for "
                         f"{stack.probs.shape[1]} base channels")
    if lut.min() < 0 or lut.max() >= k_classes:
        raise ValueError(f"fuse_abe: class mapping outside [0, {k_classes})")
    conf = stack.probs.max(axis=1)
    winner = stack.probs.argmax(axis=1)
    class_map = np.where(conf >= threshold, lut[winner], 0)
    return TeacherPrediction(_one_hot(class_map, k_classes), class_map)


def build_meta(kind: str, n_models: int, k_classes: int, seed: int = 0,
               depth: int = 2, base_width: int = 16) -> FusionStrategy:
    if kind == ABE:
        return FusionStrategy(ABE)
    if kind not in TRAINABLE_STRATEGIES:
        raise ValueError(f"unknown fusion strategy {kind!r}; valid: {STRATEGIES}")
    if n_models < 2:
        raise ValueError(f"build_meta: need at least 2 base models, got {n_models}")
    if k_classes < 2:
        raise ValueError(f"build_meta: need at least 2 classes, got {k_classes}")
    if kind == MCE:
        spec = ModelSpec(nets.CONV1X1, n_models, k_classes, depth=1, base_width=1, seed=seed)
    else:
        arch = nets.SEGNET if kind == MSNE else nets.UNET
        spec = ModelSpec(arch, n_models, k_classes, depth=depth, base_width=base_width, seed=seed)
    return FusionStrategy(kind, meta_net=build(spec))


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_bases_frozen(bases):
    for role, net in bases:
        if not net.frozen or any(p.requires_grad for p in net.parameters()):
            raise ValueError(f"base {role!r} has trainable parameters; "
                             "bases must stay frozen during fusion training")


def train_meta(strategy: FusionStrategy, bases, train_set, val_set, cfg: TrainConfig):
    """Train the fusion net on precomputed stacks; bases are never updated.

    Keeps the epoch with the best validation mIOU. Returns the history rows.
    """
    if strategy.kind == ABE:
        raise ValueError("ABE is rule-based and has nothing to train")
    _check_bases_frozen(bases)
    meta = strategy.meta_net
    k = meta.spec.out_channels
    if train_set.masks.max() >= k:
        raise ValueError(f"train_meta: label outside [0, {k})")

    stack_train = stack_bases(bases, train_set.images)
    stack_val = stack_bases(bases, val_set.images)
    strategy.role_order = stack_train.roles

    def make_loss(net, xb, yb):
        return cce_loss(net.forward(xb), yb)

    best = {"miou": -1.0, "params": snapshot_params(meta), "epoch": 0}

    def on_epoch(net, epoch):
        logits = predict_batched(net, stack_val.probs)
        acc = ConfusionAccumulator(k)
        acc.update(logits.argmax(axis=1), val_set.masks)
        val = miou(acc)
        if val > best["miou"]:
            best.update(miou=val, params=snapshot_params(net), epoch=epoch)
        return {"val_miou": val}

    history = fit(meta, stack_train.probs, train_set.masks, make_loss, cfg, on_epoch=on_epoch)
    restore_params(meta, best["params"])
    return history


def teacher_forward(strategy: FusionStrategy, bases, batch: np.ndarray, class_of_role,
                    k_classes: int, threshold: float = 0.5) -> TeacherPrediction:
    stack = stack_bases(bases, batch)
    if strategy.role_order is not None and stack.roles != tuple(strategy.role_order):
        raise ValueError(f"base role order {stack.roles} does not match the order the fusion "
                         f"net was trained with {tuple(strategy.role_order)}")
    if strategy.kind == ABE:
        return fuse_abe(stack, class_of_role, k_classes, threshold)
    logits = predict_batched(strategy.meta_net, stack.probs)
    probs = _softmax_np(logits)
    return TeacherPrediction(probs, probs.argmax(axis=1))


# ---------------------------------------------------------------------------
# manifest: the deployable description of a teacher
# ---------------------------------------------------------------------------

@dataclass
class EnsembleManifest:
    strategy: str
    classes: list                 # class names, index = class id (0 = background)
    bases: list                   # [{"role", "checkpoint", "class_index"}] in stack order
    meta_checkpoint: str = None
    meta_role_order: list = None

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"manifest strategy {self.strategy!r} not in {STRATEGIES}")
        if len(self.classes) < 2:
            raise ValueError("manifest needs at least 2 classes")
        if len(self.bases) < 2:
            raise ValueError("manifest needs at least 2 base models")
        seen = set()
        for entry in self.bases:
            role = BaseRole(entry["role"]).id
            if role in seen:
                raise ValueError(f"duplicate base role {role!r} in manifest")
            seen.add(role)
            if not 0 <= int(entry["class_index"]) < len(self.classes):
                raise ValueError(f"base {role!r} maps to class {entry['class_index']}, "
                                 f"outside [0, {len(self.classes)})")
        return self

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"strategy": self.strategy, "classes": self.classes,
                       "bases": self.bases, "meta_checkpoint": self.meta_checkpoint,
                       "meta_role_order": self.meta_role_order}, f, indent=2)

    @classmethod
    def load(cls, path) -> "EnsembleManifest":
        with open(path) as f:
            raw = json.load(f)
        known = {"strategy", "classes", "bases", "meta_checkpoint", "meta_role_order"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**raw).validate()


class Teacher:
    """A manifest loaded into memory: frozen bases plus a fusion strategy."""

    def __init__(self, strategy: FusionStrategy, bases, class_of_role, classes,
                 threshold: float = 0.5):
        if len(bases) < 2:
            raise ValueError("a teacher needs at least 2 base models")
        self.strategy = strategy
        self.bases = bases
        self.class_of_role = list(class_of_role)
        self.classes = list(classes)
        self.k = len(classes)
        self.threshold = threshold
        for _, net in bases:
            net.freeze()

    @property
    def in_channels(self):
        return self.bases[0][1].spec.in_channels

    @classmethod
    def from_manifest(cls, manifest: EnsembleManifest, base_dir=".") -> "Teacher":
        manifest.validate()
        bases = []
        class_of_role = []
        for entry in manifest.bases:
            path = os.path.join(base_dir, entry["checkpoint"])
            if not os.path.exists(path):
                raise FileNotFoundError(f"base checkpoint not found: {path}")
            net = load_checkpoint(path)
            net.freeze()
            bases.append((entry["role"], net))
            class_of_role.append(int(entry["class_index"]))
        if manifest.strategy == ABE:
            strategy = FusionStrategy(ABE)
        else:
            if not manifest.meta_checkpoint:
                raise ValueError(f"manifest strategy {manifest.strategy} needs a trained "
                                 "meta checkpoint; run fusion training first")
            meta_path = os.path.join(base_dir, manifest.meta_checkpoint)
            if not os.path.exists(meta_path):
                raise FileNotFoundError(f"meta checkpoint not found: {meta_path}")
            meta = load_checkpoint(meta_path)
            meta.freeze()
            strategy = FusionStrategy(manifest.strategy, meta_net=meta,
                                      role_order=tuple(manifest.meta_role_order or ()) or None)
        return cls(strategy, bases, class_of_role, manifest.classes)

    @classmethod
    def from_manifest_path(cls, path) -> "Teacher":
        return cls.from_manifest(EnsembleManifest.load(path), base_dir=os.path.dirname(path) or ".")

    def predict(self, batch: np.ndarray) -> TeacherPrediction:
        return teacher_forward(self.strategy, self.bases, batch, self.class_of_role,
                               self.k, self.threshold)

    def flops(self, input_hw) -> int:
        total = sum(flops_count(net, input_hw) for _, net in self.bases)
        if self.strategy.kind == ABE:
            total += len(self.bases) * input_hw[0] * input_hw[1]  # argmax scan
        else:
            total += flops_count(self.strategy.meta_net, input_hw)
        return total
