"""Shared minibatch training loop.

Single-threaded and deterministic: the epoch shuffle comes from a generator
seeded by the config, so a fixed (seed, config) pair reproduces parameters
bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, Adam, backward, no_grad


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    batch: int = 2
    seed: int = 0


def snapshot_params(net):
    return [p.data.copy() for p in net.parameters()]


def restore_params(net, snap):
    for p, saved in zip(net.parameters(), snap):
        p.data = saved.copy()


def predict_batched(net, inputs: np.ndarray, batch: int = 8) -> np.ndarray:
    """No-grad forward over an array of inputs, concatenated."""
    outs = []
    with no_grad():
        for start in range(0, len(inputs), batch):
            xb = Tensor(np.ascontiguousarray(inputs[start:start + batch], dtype=np.float32))
            outs.append(net.forward(xb).data)
    return np.concatenate(outs, axis=0)


def fit(net, inputs: np.ndarray, targets, make_loss, cfg: TrainConfig, on_epoch=None):
    """Adam minibatch training.

    ``make_loss(net, x_batch, target_batch) -> Tensor`` builds the scalar
    loss; ``on_epoch(net, epoch) -> dict`` can attach validation numbers to
    the history row. Aborts with NumericError on NaN/inf loss.
    """
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(inputs))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            xb = Tensor(np.ascontiguousarray(inputs[idx], dtype=np.float32))
            loss = make_loss(net, xb, targets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}")
            backward(loss)
            opt.step()
            losses.append(value)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if on_epoch is not None:
            row.update(on_epoch(net, epoch) or {})
        history.append(row)
    return history
