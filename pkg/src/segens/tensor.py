"""Reverse-mode autodiff over dense numpy arrays.

Operations record themselves on an ambient per-thread tape (a Wengert list:
execution order is already topological). ``backward`` walks the tape in
reverse, accumulates gradients additively across fan-out, and consumes the
tape. Tensors are treated as immutable once produced; the optimizer is the
only place parameter data is mutated.

Training runs in float32; gradient checking uses float64 tensors end to end.
"""

import threading
from dataclasses import dataclass

import numpy as np

from . import kernels

BCE_EPS = 1e-7


class Tensor:
    """Dense array plus optional gradient buffer and tape link."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, (int, float)) else mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


@dataclass
class PoolIndices:
    """Per-window argmax positions; values are window-local flat indices."""

    values: np.ndarray  # uint8, same shape as the pooled output
    k: int = 2

    @property
    def shape(self):
        return self.values.shape


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of executed operations (inputs always precede uses)."""

    def __init__(self):
        self.nodes = []

    def clear(self):
        self.nodes.clear()


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
    return _state


def current_tape() -> Tape:
    return _tls().tape


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        s = _tls()
        self._prev = s.grad_enabled
        s.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def _record(out_data, inputs, fn) -> Tensor:
    out = Tensor(out_data)
    s = _tls()
    if s.grad_enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = len(s.tape.nodes)
        s.tape.nodes.append(_Node(out, tuple(t for t in inputs if isinstance(t, Tensor)), fn))
    return out


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) to every gradient-requiring leaf.

    The tape is consumed: a fresh forward pass is needed before the next call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue
        grads = node.fn(gout)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b):
    if isinstance(b, (int, float)):
        out = a.data + b
        return _record(out, (a,), lambda dy: (dy,))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda dy: (dy, dy))


def mul(a: Tensor, b):
    if isinstance(b, (int, float)):
        return _record(a.data * b, (a,), lambda dy: (dy * b,))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda dy: (dy * bd, dy * ad))


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _record(a.data.sum(), (a,), lambda dy: (np.full(shape, dy, dtype=dtype),))


# ---------------------------------------------------------------------------
# structural layer primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with bias; differentiable in x, w and b."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape[1]} do not match weight C_in "
                         f"{w.shape[1]} (input {x.shape}, weight {w.shape})")
    if b is not None and b.data.shape != (w.shape[0],):
        raise ValueError(f"conv2d: bias shape {b.data.shape} does not match C_out {w.shape[0]}")

    y = kernels.conv2d_forward(x.data, w.data, None if b is None else b.data, stride, pad)

    def fn(dy):
        dx, dw, db = kernels.conv2d_backward(
            x.data, w.data, np.ascontiguousarray(dy), stride, pad,
            need_dx=x.requires_grad, need_dw=w.requires_grad)
        return (dx, dw, db if b is not None else None)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(y, inputs, fn)


def maxpool2d_with_indices(x: Tensor, k: int = 2, stride: int = 2):
    """2x2/stride-2 max pooling; ties go to the lowest window-local index."""
    if k != 2 or stride != 2:
        raise ValueError(f"maxpool2d_with_indices supports only k=2, stride=2, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d_with_indices: spatial dims ({h}, {w}) must be even; "
                         "pad inputs to multiples of 2 per stage")
    y, idx = kernels.maxpool2x2_forward(x.data)

    def fn(dy):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(dy), idx),)

    return _record(y, (x,), fn), PoolIndices(idx, 2)


def max_unpool2d(x: Tensor, indices: PoolIndices, k: int = 2) -> Tensor:
    """Place each value at its recorded window position; zeros elsewhere."""
    if k != 2:
        raise ValueError(f"max_unpool2d supports only k=2, got {k}")
    if x.shape != indices.shape:
        raise ValueError(f"max_unpool2d: input shape {x.shape} does not match indices shape {indices.shape}")
    if indices.values.max(initial=0) >= k * k:
        raise ValueError("max_unpool2d: index outside its pooling window")
    idx = indices.values
    y = kernels.unpool2x2_forward(x.data, idx)

    def fn(dy):
        return (kernels.unpool2x2_backward(np.ascontiguousarray(dy), idx),)

    return _record(y, (x,), fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    y = kernels.upsample2x_forward(x.data)

    def fn(dy):
        return (kernels.upsample2x_backward(np.ascontiguousarray(dy)),)

    return _record(y, (x,), fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def fn(dy):
        return (np.ascontiguousarray(dy[:, :ca]), np.ascontiguousarray(dy[:, ca:]))

    return _record(y, (a, b), fn)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def fn(dy):
        return (dy * (y > 0),)  # subgradient 0 at exactly 0

    return _record(y, (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)

    def fn(dy):
        return (dy * y * (1.0 - y),)

    return _record(y, (x,), fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of an (N, C, H, W) tensor."""
    if x.data.ndim != 4 or x.shape[1] < 2:
        raise ValueError(f"softmax_channels requires a 4-D tensor with C >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(dy):
        dot = (dy * y).sum(axis=1, keepdims=True)
        return (y * (dy - dot),)

    return _record(y, (x,), fn)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cce_loss(pred_logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel categorical cross-entropy from raw logits.

    ``target`` is an (N, H, W) integer class map; computed with a stable
    log-sum-exp rather than softmax followed by log.
    """
    z = pred_logits.data
    if z.ndim != 4 or z.shape[1] < 2:
        raise ValueError(f"cce_loss requires (N, C, H, W) logits with C >= 2, got {pred_logits.shape}")
    target = np.asarray(target)
    if target.shape != (z.shape[0], z.shape[2], z.shape[3]):
        raise ValueError(f"cce_loss: target shape {target.shape} does not match logits {pred_logits.shape}")
    c = z.shape[1]
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"cce_loss: class index outside [0, {c}) in target")

    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    t4 = target.astype(np.intp)[:, None, :, :]
    z_true = np.take_along_axis(z, t4, axis=1)
    n_px = z.shape[0] * z.shape[2] * z.shape[3]
    loss = (lse - z_true).sum() / n_px

    def fn(dy):
        p = np.exp(z - lse)
        np.put_along_axis(p, t4, np.take_along_axis(p, t4, axis=1) - 1.0, axis=1)
        return (p * (dy / n_px),)

    return _record(np.asarray(loss, dtype=z.dtype), (pred_logits,), fn)


def bce_loss(c_tau, c_s: Tensor) -> Tensor:
    """Mean binary cross-entropy between a target probability map and a
    predicted one.

    ``c_tau`` is treated as a constant target (array or tensor); ``c_s`` is
    clamped to [BCE_EPS, 1 - BCE_EPS] before the logs.
    """
    t = c_tau.data if isinstance(c_tau, Tensor) else np.asarray(c_tau)
    s_raw = c_s.data
    if t.shape != s_raw.shape:
        raise ValueError(f"bce_loss: shape mismatch target {t.shape} vs prediction {s_raw.shape}")
    s = np.clip(s_raw, BCE_EPS, 1.0 - BCE_EPS)
    m = s_raw.size
    loss = -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s)).sum() / m

    def fn(dy):
        inside = (s_raw > BCE_EPS) & (s_raw < 1.0 - BCE_EPS)
        g = -(t / s - (1.0 - t) / (1.0 - s)) * inside * (dy / m)
        return (g.astype(s_raw.dtype),)

    return _record(np.asarray(loss, dtype=s_raw.dtype), (c_s,), fn)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("Adam: cannot register a parameter that does not require gradients")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("Adam: missing gradient on a registered parameter; run backward first")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.grad = None
