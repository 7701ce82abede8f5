"""Encoder-decoder network construction and bookkeeping.

Two desk-scale architectures share one declarative spec:

* SEGNET: each encoder stage is conv3x3+relu twice then 2x2 max pooling with
  saved argmax indices; the decoder mirrors it, unpooling with those indices.
* UNET: same encoder without index reuse; the decoder upsamples 2x (nearest)
  and concatenates the matching encoder feature map before its convs.

A third arch, CONV1X1, is a single pointwise conv used as the smallest
trainable fusion head. Binary heads (out_channels == 1) end in a sigmoid;
multi-class heads return raw logits.
"""

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .rng import SplitMix64, he_uniform
from .tensor import (Tensor, conv2d, relu, sigmoid, maxpool2d_with_indices,
                     max_unpool2d, upsample_nearest2x, concat_channels, no_grad)

SEGNET = "SEGNET"
UNET = "UNET"
CONV1X1 = "CONV1X1"
ARCHS = (SEGNET, UNET, CONV1X1)

CHECKPOINT_MAGIC = b"SGNS"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    in_channels: int
    out_channels: int
    depth: int = 3
    base_width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"ModelSpec.arch must be one of {ARCHS}, got {self.arch!r}")
        if self.in_channels < 1:
            raise ValueError(f"ModelSpec.in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            raise ValueError(f"ModelSpec.out_channels must be >= 1, got {self.out_channels}")
        if self.depth < 1:
            raise ValueError(f"ModelSpec.depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"ModelSpec.base_width must be >= 1, got {self.base_width}")

    def widths(self):
        return [self.base_width * (1 << i) for i in range(self.depth)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


def _conv_defs(spec: ModelSpec):
    """Ordered (name, c_in, c_out, k) for every conv layer; fixes both the
    parameter layout and the checkpoint order."""
    if spec.arch == CONV1X1:
        return [("head", spec.in_channels, spec.out_channels, 1)]
    w = spec.widths()
    defs = []
    prev = spec.in_channels
    for i, wi in enumerate(w, start=1):
        defs.append((f"enc{i}.conv1", prev, wi, 3))
        defs.append((f"enc{i}.conv2", wi, wi, 3))
        prev = wi
    if spec.arch == SEGNET:
        for i in range(spec.depth, 0, -1):
            wi = w[i - 1]
            out = w[i - 2] if i > 1 else w[0]
            defs.append((f"dec{i}.conv1", wi, wi, 3))
            defs.append((f"dec{i}.conv2", wi, out, 3))
    else:
        below = w[-1]
        for i in range(spec.depth, 0, -1):
            wi = w[i - 1]
            defs.append((f"dec{i}.conv1", below + wi, wi, 3))
            defs.append((f"dec{i}.conv2", wi, wi, 3))
            below = wi
    defs.append(("head", w[0], spec.out_channels, 1))
    return defs


class Network:
    """A spec plus its ordered parameter list."""

    def __init__(self, spec: ModelSpec, params: dict, frozen: bool = False):
        self.spec = spec
        self._params = params  # name -> {"w": Tensor, "b": Tensor}
        self.frozen = frozen
        if frozen:
            self.freeze()

    def named_parameters(self):
        for name, cin, cout, k in _conv_defs(self.spec):
            yield f"{name}.w", self._params[name]["w"]
            yield f"{name}.b", self._params[name]["b"]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False

    def _conv(self, name, h, stride=1, pad=1):
        layer = self._params[name]
        return conv2d(h, layer["w"], layer["b"], stride=stride, pad=pad)

    def forward(self, batch: Tensor) -> Tensor:
        spec = self.spec
        n, c, h, w = batch.shape
        if c != spec.in_channels:
            raise ValueError(f"forward: batch has {c} channels, spec requires {spec.in_channels}")
        if spec.arch == CONV1X1:
            out = self._conv("head", batch, pad=0)
            return sigmoid(out) if spec.out_channels == 1 else out
        mult = 1 << spec.depth
        if h % mult or w % mult:
            raise ValueError(f"forward: spatial dims ({h}, {w}) must be multiples of {mult} "
                             f"for depth {spec.depth}")
        x = batch
        if spec.arch == SEGNET:
            saved_idx = []
            for i in range(1, spec.depth + 1):
                x = relu(self._conv(f"enc{i}.conv1", x))
                x = relu(self._conv(f"enc{i}.conv2", x))
                x, idx = maxpool2d_with_indices(x)
                saved_idx.append(idx)
            for i in range(spec.depth, 0, -1):
                x = max_unpool2d(x, saved_idx[i - 1])
                x = relu(self._conv(f"dec{i}.conv1", x))
                x = relu(self._conv(f"dec{i}.conv2", x))
        else:
            skips = []
            for i in range(1, spec.depth + 1):
                x = relu(self._conv(f"enc{i}.conv1", x))
                x = relu(self._conv(f"enc{i}.conv2", x))
                skips.append(x)
                x, _ = maxpool2d_with_indices(x)
            for i in range(spec.depth, 0, -1):
                x = upsample_nearest2x(x)
                x = concat_channels(x, skips[i - 1])
                x = relu(self._conv(f"dec{i}.conv1", x))
                x = relu(self._conv(f"dec{i}.conv2", x))
        out = self._conv("head", x, pad=0)
        return sigmoid(out) if spec.out_channels == 1 else out

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Inference without tape recording; returns a plain array."""
        dtype = self.parameters()[0].dtype
        with no_grad():
            return self.forward(Tensor(np.asarray(batch, dtype=dtype))).data


def build(spec: ModelSpec, dtype=np.float32) -> Network:
    """He-uniform conv weights from a splitmix64 stream seeded by the spec;
    biases start at zero. Equal spec implies bit-identical parameters."""
    rng = SplitMix64(spec.seed)
    params = {}
    for name, cin, cout, k in _conv_defs(spec):
        w = he_uniform(rng, cin * k * k, (cout, cin, k, k), dtype=dtype)
        b = np.zeros(cout, dtype=dtype)
        params[name] = {"w": Tensor(w, requires_grad=True),
                        "b": Tensor(b, requires_grad=True)}
    return Network(spec, params)


def param_count(net_or_spec) -> int:
    spec = net_or_spec.spec if isinstance(net_or_spec, Network) else net_or_spec
    return sum(k * k * cin * cout + cout for _, cin, cout, k in _conv_defs(spec))


def flops_count(net_or_spec, input_hw) -> int:
    """Forward-pass FLOPs at the given spatial size.

    Convolutions count one multiply-accumulate as 2 FLOPs; each activation
    costs 2 per element; pooling, unpooling and upsampling cost one
    comparison/copy per output element.
    """
    spec = net_or_spec.spec if isinstance(net_or_spec, Network) else net_or_spec
    h, w = input_hw
    if spec.arch != CONV1X1:
        mult = 1 << spec.depth
        if h % mult or w % mult:
            raise ValueError(f"flops_count: spatial dims ({h}, {w}) must be multiples of {mult}")

    total = 0

    def conv_cost(cin, cout, k, hh, ww):
        return 2 * k * k * cin * cout * hh * ww + 2 * cout * hh * ww

    if spec.arch == CONV1X1:
        return conv_cost(spec.in_channels, spec.out_channels, 1, h, w)

    widths = spec.widths()
    prev = spec.in_channels
    for wi in widths:
        total += conv_cost(prev, wi, 3, h, w)
        total += conv_cost(wi, wi, 3, h, w)
        h, w = h // 2, w // 2
        total += wi * h * w  # pool comparisons
        prev = wi
    if spec.arch == SEGNET:
        for i in range(spec.depth, 0, -1):
            wi = widths[i - 1]
            out = widths[i - 2] if i > 1 else widths[0]
            h, w = h * 2, w * 2
            total += wi * h * w  # unpool copies
            total += conv_cost(wi, wi, 3, h, w)
            total += conv_cost(wi, out, 3, h, w)
    else:
        below = widths[-1]
        for i in range(spec.depth, 0, -1):
            wi = widths[i - 1]
            h, w = h * 2, w * 2
            total += below * h * w  # upsample copies
            total += conv_cost(below + wi, wi, 3, h, w)
            total += conv_cost(wi, wi, 3, h, w)
            below = wi
    total += conv_cost(widths[0], spec.out_channels, 1, h, w)
    return total


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(net: Network, path) -> None:
    """Binary layout: magic, u16 version, length-prefixed spec JSON, then each
    parameter as (u16 name length, name, u8 ndim, u32 dims, little-endian
    float32 data). Values above float32 are narrowed on save."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    spec_bytes = net.spec.to_json().encode("utf-8")
    blob += struct.pack("<I", len(spec_bytes))
    blob += spec_bytes
    named = list(net.named_parameters())
    blob += struct.pack("<I", len(named))
    for name, p in named:
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", p.data.ndim)
        for d in p.data.shape:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (spec_len,) = r.unpack("<I")
    spec = ModelSpec.from_json(r.take(spec_len).decode("utf-8"))
    (n_params,) = r.unpack("<I")
    flat = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack("<" + "I" * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        flat[name] = data
    params = {}
    for name, cin, cout, k in _conv_defs(spec):
        try:
            w = flat[f"{name}.w"]
            b = flat[f"{name}.b"]
        except KeyError as e:
            raise CheckpointError(f"checkpoint missing parameter {e.args[0]!r}") from None
        if w.shape != (cout, cin, k, k) or b.shape != (cout,):
            raise CheckpointError(f"checkpoint parameter {name!r} has shape {w.shape}, "
                                  f"expected {(cout, cin, k, k)}")
        params[name] = {"w": Tensor(w, requires_grad=True), "b": Tensor(b, requires_grad=True)}
    return Network(spec, params)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def checkpoint_hash(path) -> str:
    """64-bit FNV-1a over the file payload, as a hex string."""
    with open(path, "rb") as f:
        return f"{fnv1a64(f.read()):016x}"
