"""Procedural field scenes with exact ground-truth masks.

Scenes are soil-textured backgrounds with plant instances laid out along
crop rows. Each plant class has its own shape grammar (lobed ellipse
clusters) and green-hue band; broadleaf weeds deliberately share the late
canola hue and size range so the two stay confusable. Augmentations (blur,
gain, shadow bands, sensor noise) touch image pixels only, never the mask.

Everything is a pure function of (spec, seed).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

BACKGROUND_SOIL = 0
NARROW_LEAF = 1
CANOLA_EARLY = 2
CANOLA_LATE = 3
KOCHIA = 4
BROADLEAF_WEED = 5

CLASS_NAMES = ("soil", "narrow_leaf", "canola_early", "canola_late", "kochia", "broadleaf_weed")

ROLES = ("C_nl", "C_c_E", "C_c_L", "W_k", "W_bl", "S_bs")

ROLE_TARGET_CLASS = {
    "C_nl": NARROW_LEAF,
    "C_c_E": CANOLA_EARLY,
    "C_c_L": CANOLA_LATE,
    "W_k": KOCHIA,
    "W_bl": BROADLEAF_WEED,
    "S_bs": BACKGROUND_SOIL,
}

ROLE_DEFAULT_IMAGES = 60

MSCD_LIKE = "MSCD_like"
KWD_LIKE = "KWD_like"
EVAL_KINDS = (MSCD_LIKE, KWD_LIKE)

_SOIL_COLOR = np.array([0.40, 0.30, 0.20])


@dataclass(frozen=True)
class PlantClass:
    """Shape grammar for one vegetation class: a cluster of rotated ellipses."""

    id: int
    lobes: tuple          # (lo, hi) inclusive lobe count
    lobe_rx: tuple        # semi-axis ranges, pixels
    lobe_ry: tuple
    spread: float         # cluster radius around the instance center
    color: tuple          # mean RGB
    color_jitter: float


PLANT_CLASSES = {
    NARROW_LEAF: PlantClass(NARROW_LEAF, (1, 2), (5.0, 9.0), (0.8, 1.4), 2.0,
                            (0.36, 0.56, 0.20), 0.04),
    CANOLA_EARLY: PlantClass(CANOLA_EARLY, (2, 2), (2.0, 3.5), (1.4, 2.4), 3.0,
                             (0.22, 0.68, 0.25), 0.05),
    CANOLA_LATE: PlantClass(CANOLA_LATE, (3, 6), (3.0, 5.5), (2.2, 4.2), 4.5,
                            (0.10, 0.45, 0.15), 0.04),
    KOCHIA: PlantClass(KOCHIA, (6, 12), (1.0, 2.0), (1.0, 1.8), 5.0,
                       (0.46, 0.60, 0.40), 0.05),
    BROADLEAF_WEED: PlantClass(BROADLEAF_WEED, (1, 2), (4.0, 6.5), (3.0, 5.0), 2.0,
                               (0.11, 0.46, 0.16), 0.04),
}


@dataclass(frozen=True)
class AugmentSpec:
    blur_sigma: float = 0.0
    gain: float = 1.0
    shadow: tuple = None  # (position 0..1, width px, attenuation)
    noise_std: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    hw: tuple = (64, 64)
    counts: dict = field(default_factory=dict)  # class id -> instance count
    rows: int = None                            # crop-row count, None = no row layout
    augment: AugmentSpec = AugmentSpec()
    seed: int = 0

    def __post_init__(self):
        h, w = self.hw
        if h % 8 or w % 8 or h < 16 or w < 16:
            raise ValueError(f"SceneSpec.hw must be multiples of 8 and >= 16, got {self.hw}")
        for cid in self.counts:
            if cid not in PLANT_CLASSES:
                raise ValueError(f"SceneSpec.counts: unknown plant class id {cid}")


@dataclass
class Dataset:
    images: np.ndarray      # (M, 3, H, W) float32 in [0, 1]
    masks: np.ndarray       # (M, H, W) uint8 class ids
    class_names: tuple

    def __len__(self):
        return self.images.shape[0]


def _ellipse_mask(yy, xx, cy, cx, ry, rx, theta):
    dy = yy - cy
    dx = xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _blur1d(a, weights, axis):
    r = len(weights) // 2
    padded = np.pad(a, [(r, r) if ax == axis else (0, 0) for ax in range(a.ndim)], mode="edge")
    out = np.zeros_like(a)
    for i, wgt in enumerate(weights):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i, i + a.shape[axis])
        out += wgt * padded[tuple(sl)]
    return out


def _gaussian_blur(img, sigma):
    r = max(1, int(np.ceil(2.0 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    return _blur1d(_blur1d(img, k, axis=1), k, axis=2)


def generate_scene(spec: SceneSpec):
    """Render one scene; returns (image (3,H,W) float32, mask (H,W) uint8)."""
    h, w = spec.hw
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # soil: coarse value noise over a base brown plus fine grain
    coarse = rng.uniform(-1.0, 1.0, (h // 8 + 1, w // 8 + 1))
    coarse = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    lum = 1.0 + 0.10 * coarse + 0.04 * rng.uniform(-1.0, 1.0, (h, w))
    img = _SOIL_COLOR[:, None, None] * lum[None, :, :]
    mask = np.full((h, w), BACKGROUND_SOIL, dtype=np.uint8)

    # crop rows: parallel lines with a shared orientation
    if spec.rows:
        theta_row = rng.uniform(-np.pi / 4, np.pi / 4)
        offsets = (np.arange(spec.rows) + 0.5) / spec.rows
    else:
        theta_row = 0.0
        offsets = None

    for cid in sorted(spec.counts):
        plant = PLANT_CLASSES[cid]
        for _ in range(spec.counts[cid]):
            if offsets is not None:
                off = offsets[rng.integers(len(offsets))]
                t = rng.uniform(-0.1, 1.1)
                # walk along the row direction, offset perpendicular to it
                cy = off * h * np.cos(theta_row) + t * w * np.sin(theta_row) + rng.normal(0, 1.5)
                cx = t * w * np.cos(theta_row) - off * h * np.sin(theta_row) + rng.normal(0, 1.5)
                cy %= h
                cx %= w
            else:
                cy = rng.uniform(0, h)
                cx = rng.uniform(0, w)
            base = np.asarray(plant.color) + rng.normal(0, plant.color_jitter, 3)
            n_lobes = int(rng.integers(plant.lobes[0], plant.lobes[1] + 1))
            for _ in range(n_lobes):
                ly = cy + rng.normal(0, plant.spread)
                lx = cx + rng.normal(0, plant.spread)
                rx_ = rng.uniform(*plant.lobe_rx)
                ry_ = rng.uniform(*plant.lobe_ry)
                theta = rng.uniform(0, np.pi)
                m = _ellipse_mask(yy, xx, ly, lx, ry_, rx_, theta)
                if not m.any():
                    continue
                shade = 1.0 + 0.08 * rng.standard_normal()
                color = np.clip(base * shade, 0.0, 1.0)
                img[:, m] = color[:, None] * (1.0 + 0.05 * rng.standard_normal(int(m.sum())))
                mask[m] = cid

    aug = spec.augment
    if aug.blur_sigma > 0:
        img = _gaussian_blur(img, aug.blur_sigma)
    if aug.gain != 1.0:
        img = img * aug.gain
    if aug.shadow is not None:
        pos, width, atten = aug.shadow
        band = np.abs(xx[0] - pos * w) < width / 2.0
        img[:, :, band] *= atten
    if aug.noise_std > 0:
        img = img + rng.normal(0.0, aug.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _random_augment(rng) -> AugmentSpec:
    shadow = None
    if rng.random() < 0.3:
        shadow = (float(rng.uniform(0.1, 0.9)), float(rng.uniform(8, 20)),
                  float(rng.uniform(0.5, 0.8)))
    return AugmentSpec(
        blur_sigma=float(rng.uniform(0.5, 1.1)) if rng.random() < 0.4 else 0.0,
        gain=float(rng.uniform(0.75, 1.25)),
        shadow=shadow,
        noise_std=float(rng.uniform(0.005, 0.025)),
    )


def _counts_for_role(role: str, rng) -> dict:
    target = ROLE_TARGET_CLASS[role]
    counts = {}
    if target != BACKGROUND_SOIL:
        counts[target] = int(rng.integers(4, 9))
    # distractors: confusable classes always present, one more at random
    forced = {"W_k": [CANOLA_EARLY], "C_c_L": [BROADLEAF_WEED], "W_bl": [CANOLA_LATE]}.get(role, [])
    pool = [c for c in PLANT_CLASSES if c != target and c not in forced]
    picks = forced + list(rng.choice(pool, size=min(2, len(pool)), replace=False))
    for cid in picks:
        counts[int(cid)] = counts.get(int(cid), 0) + int(rng.integers(1, 4))
    return counts


def make_binary_dataset(role: str, n_images: int = ROLE_DEFAULT_IMAGES, seed: int = 0,
                        hw=(64, 64)) -> Dataset:
    """One-vs-all dataset for a base model: mask 1 on the role's target class."""
    if role not in ROLE_TARGET_CLASS:
        raise ValueError(f"unknown role {role!r}; valid roles: {', '.join(ROLES)}")
    if n_images < 4:
        raise ValueError(f"make_binary_dataset needs n_images >= 4, got {n_images}")
    target = ROLE_TARGET_CLASS[role]
    images, masks = [], []
    for i in range(n_images):
        rng = np.random.default_rng((seed, ROLES.index(role), i))
        spec = SceneSpec(hw=hw, counts=_counts_for_role(role, rng),
                         rows=int(rng.integers(3, 6)), augment=_random_augment(rng),
                         seed=int(rng.integers(0, 2 ** 31)))
        img, mask = generate_scene(spec)
        images.append(img)
        masks.append((mask == target).astype(np.uint8))
    return Dataset(np.stack(images), np.stack(masks),
                   (f"not_{CLASS_NAMES[target]}", CLASS_NAMES[target]))


def _counts_for_eval(kind: str, rng) -> dict:
    if kind == MSCD_LIKE:
        counts = {CANOLA_EARLY: int(rng.integers(2, 5)), CANOLA_LATE: int(rng.integers(2, 5))}
        if rng.random() < 0.7:
            counts[NARROW_LEAF] = int(rng.integers(1, 3))
        if rng.random() < 0.6:
            counts[BROADLEAF_WEED] = int(rng.integers(1, 3))
        if rng.random() < 0.3:
            counts[KOCHIA] = 1
    else:
        counts = {KOCHIA: int(rng.integers(2, 5))}
        if rng.random() < 0.7:
            counts[CANOLA_EARLY] = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            counts[CANOLA_LATE] = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            counts[NARROW_LEAF] = int(rng.integers(1, 3))
    return counts


DEFAULT_SPLIT = (0.70, 0.15, 0.15)  # train / val / test


def split_sizes(n: int, split=DEFAULT_SPLIT):
    """Val and test round down, train takes the remainder."""
    n_val = int(n * split[1])
    n_test = int(n * split[2])
    return n - n_val - n_test, n_val, n_test


def split_dataset(ds: Dataset, seed: int, split=DEFAULT_SPLIT) -> dict:
    """Deterministic shuffled train/val/test membership."""
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train, n_val, n_test = split_sizes(len(ds), split)
    parts = {"train": order[:n_train],
             "val": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    return {name: Dataset(ds.images[idx], ds.masks[idx], ds.class_names)
            for name, idx in parts.items()}


def make_multiclass_eval_set(kind: str, n_images: int, seed: int = 0, hw=(64, 64),
                             split=DEFAULT_SPLIT) -> dict:
    """Two-class eval scenes with a deterministic 70/15/15 split.

    Returns {"train": Dataset, "val": Dataset, "test": Dataset}.
    """
    if kind not in EVAL_KINDS:
        raise ValueError(f"unknown eval set kind {kind!r}; valid: {EVAL_KINDS}")
    if n_images < 10:
        raise ValueError(f"make_multiclass_eval_set needs n_images >= 10, got {n_images}")
    if kind == MSCD_LIKE:
        fg = (CANOLA_EARLY, CANOLA_LATE)
        class_names = ("non_canola", "canola")
    else:
        fg = (KOCHIA,)
        class_names = ("non_kochia", "kochia")
    images, masks = [], []
    for i in range(n_images):
        rng = np.random.default_rng((seed, kind == KWD_LIKE, i))
        spec = SceneSpec(hw=hw, counts=_counts_for_eval(kind, rng),
                         rows=int(rng.integers(3, 6)), augment=_random_augment(rng),
                         seed=int(rng.integers(0, 2 ** 31)))
        img, mask = generate_scene(spec)
        images.append(img)
        masks.append(np.isin(mask, fg).astype(np.uint8))
    return split_dataset(Dataset(np.stack(images), np.stack(masks), class_names), seed, split)


def make_unlabeled_images(kind: str, n_images: int, seed: int = 0, hw=(64, 64)) -> np.ndarray:
    """Images drawn from the same scene distribution as the eval sets, with
    no masks attached (distillation input)."""
    if kind not in EVAL_KINDS:
        raise ValueError(f"unknown eval set kind {kind!r}; valid: {EVAL_KINDS}")
    images = []
    for i in range(n_images):
        rng = np.random.default_rng((seed, 3, kind == KWD_LIKE, i))
        spec = SceneSpec(hw=hw, counts=_counts_for_eval(kind, rng),
                         rows=int(rng.integers(3, 6)), augment=_random_augment(rng),
                         seed=int(rng.integers(0, 2 ** 31)))
        img, _ = generate_scene(spec)
        images.append(img)
    return np.stack(images)


# ---------------------------------------------------------------------------
# netpbm file formats (binary PPM P6 for images, PGM P5 for masks)
# ---------------------------------------------------------------------------

class FormatError(ValueError):
    pass


def _read_netpbm(path, magic: str):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != magic.encode():
        got = data[:2].decode("ascii", "replace")
        raise FormatError(f"wrong magic in {path}: expected {magic}, got {got!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"malformed header in {path}: ran out of bytes")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise FormatError(f"malformed header in {path}: unexpected byte {ch!r}")
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} in {path} (only 255)")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == "P6" else 1
    want = w * h * channels
    payload = data[pos:pos + want]
    if len(payload) != want:
        raise FormatError(f"truncated payload in {path}: wanted {want} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8), w, h


def write_image_ppm(path, image: np.ndarray) -> None:
    c, h, w = image.shape
    if c != 3:
        raise FormatError(f"write_image_ppm expects a (3, H, W) image, got {image.shape}")
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def read_image_ppm(path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, "P6")
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / 255.0


def write_mask_pgm(path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise FormatError(f"write_mask_pgm expects an (H, W) mask, got {mask.shape}")
    if mask.max(initial=0) > 255:
        raise FormatError("write_mask_pgm: class ids must fit in a byte")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_mask_pgm(path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, "P5")
    return raw.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# on-disk dataset layout: <root>/<split>/img_%05d.ppm + msk_%05d.pgm
# ---------------------------------------------------------------------------

def save_dataset_dir(root, splits: dict, meta: dict) -> None:
    os.makedirs(root, exist_ok=True)
    manifest = dict(meta)
    manifest["splits"] = {}
    for split, ds in splits.items():
        sdir = os.path.join(root, split)
        os.makedirs(sdir, exist_ok=True)
        files = []
        for i in range(len(ds)):
            img_name = f"img_{i:05d}.ppm"
            msk_name = f"msk_{i:05d}.pgm"
            write_image_ppm(os.path.join(sdir, img_name), ds.images[i])
            write_mask_pgm(os.path.join(sdir, msk_name), ds.masks[i])
            files.append([img_name, msk_name])
        manifest["splits"][split] = files
        manifest["classes"] = list(ds.class_names)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset_dir(root, split: str) -> Dataset:
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if split not in manifest["splits"]:
        raise FileNotFoundError(f"split {split!r} not present in {manifest_path}")
    images, masks = [], []
    for img_name, msk_name in manifest["splits"][split]:
        images.append(read_image_ppm(os.path.join(root, split, img_name)))
        masks.append(read_mask_pgm(os.path.join(root, split, msk_name)))
    return Dataset(np.stack(images), np.stack(masks), tuple(manifest["classes"]))
