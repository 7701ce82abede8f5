"""Segmentation quality and efficiency metrics.

IOU statistics accumulate per-class TP/FP/FN pixel tallies over a whole test
set (dataset-level, not per-image averages), so streamed updates and one big
update give identical numbers.
"""

import csv
import time

import numpy as np


class ConfusionAccumulator:
    """Per-class TP/FP/FN pixel tallies for k classes."""

    def __init__(self, k: int):
        if k < 2:
            raise ValueError(f"ConfusionAccumulator needs k >= 2 classes, got {k}")
        self.k = k
        self.tp = np.zeros(k, dtype=np.int64)
        self.fp = np.zeros(k, dtype=np.int64)
        self.fn = np.zeros(k, dtype=np.int64)
        self.gt_count = np.zeros(k, dtype=np.int64)
        self.total = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"update: pred shape {pred.shape} != gt shape {gt.shape}")
        for name, arr in (("pred", pred), ("gt", gt)):
            if arr.min() < 0 or arr.max() >= self.k:
                raise ValueError(f"update: {name} contains class outside [0, {self.k})")
        p = pred.ravel().astype(np.int64)
        g = gt.ravel().astype(np.int64)
        hit = p == g
        self.tp += np.bincount(g[hit], minlength=self.k)
        self.fp += np.bincount(p[~hit], minlength=self.k)
        self.fn += np.bincount(g[~hit], minlength=self.k)
        self.gt_count += np.bincount(g, minlength=self.k)
        self.total += g.size

    def merge(self, other: "ConfusionAccumulator") -> None:
        if other.k != self.k:
            raise ValueError(f"merge: class counts differ ({self.k} vs {other.k})")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.gt_count += other.gt_count
        self.total += other.total


def iou_per_class(acc: ConfusionAccumulator) -> np.ndarray:
    """IoU_c = tp / (tp + fp + fn); a class never seen and never predicted
    scores 1.0 (keeps sparse synthetic scenes NaN-free)."""
    if acc.total == 0:
        raise ValueError("iou_per_class: empty accumulator")
    denom = acc.tp + acc.fp + acc.fn
    out = np.ones(acc.k, dtype=np.float64)
    nz = denom > 0
    out[nz] = acc.tp[nz] / denom[nz]
    return out


def miou(acc: ConfusionAccumulator) -> float:
    return float(iou_per_class(acc).mean())


def fwiou(acc: ConfusionAccumulator) -> float:
    """Ground-truth-frequency weighted mean of the per-class IOUs."""
    weights = acc.gt_count / acc.total
    return float((weights * iou_per_class(acc)).sum())


def write_metrics_csv(path, rows, class_names) -> None:
    """Rows of (model name, accumulator) to a CSV shaped
    model,fwIOU,mIOU,IOU_<class> per class."""
    header = ["model", "fwIOU", "mIOU"] + [f"IOU_{c}" for c in class_names]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for name, acc in rows:
            ious = iou_per_class(acc)
            writer.writerow([name, f"{fwiou(acc):.4f}", f"{miou(acc):.4f}"]
                            + [f"{v:.4f}" for v in ious])


def benchmark_inference(model, input_hw, repeats: int = 5, in_channels=None, batch=1, seed=0):
    """Wall-clock stats for repeated forward passes on one fixed random input.

    ``model`` is anything with a ``predict(batch) -> array`` method. One
    warm-up pass runs before timing starts.
    """
    if repeats < 3:
        raise ValueError(f"benchmark_inference needs repeats >= 3, got {repeats}")
    if in_channels is None:
        in_channels = model.spec.in_channels if hasattr(model, "spec") else model.in_channels
    h, w = input_hw
    rng = np.random.default_rng(seed)
    x = rng.random((batch, in_channels, h, w), dtype=np.float32)
    model.predict(x)  # warm-up, excluded
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(x)
        samples.append(time.perf_counter() - t0)
    arr = np.asarray(samples)
    return {"mean_seconds": float(arr.mean()), "std_seconds": float(arr.std()),
            "samples": samples}
