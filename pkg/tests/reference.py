"""Independent brute-force reference implementations.

Everything here is written as plain nested loops and scalar math, on purpose:
these are the oracles the optimized library paths are checked against, so
they must not share any code with them.
"""

import math

import numpy as np


def conv2d_ref(x, w, b, stride=1, pad=0):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for ib in range(n):
        for oc in range(co):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                hi = r * stride + i - pad
                                wi = c * stride + j - pad
                                if 0 <= hi < h and 0 <= wi < wd:
                                    acc += float(w[oc, ic, i, j]) * float(x[ib, ic, hi, wi])
                    out[ib, oc, r, c] = acc
    return out


def maxpool2x2_ref(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    y = np.zeros((n, c, ho, wo), dtype=np.float64)
    idx = np.zeros((n, c, ho, wo), dtype=np.int64)
    for ib in range(n):
        for ic in range(c):
            for r in range(ho):
                for col in range(wo):
                    best, karg = None, 0
                    for k in range(4):
                        v = float(x[ib, ic, 2 * r + k // 2, 2 * col + k % 2])
                        if best is None or v > best:
                            best, karg = v, k
                    y[ib, ic, r, col] = best
                    idx[ib, ic, r, col] = karg
    return y, idx


def unpool2x2_ref(x, idx):
    n, c, ho, wo = x.shape
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=np.float64)
    for ib in range(n):
        for ic in range(c):
            for r in range(ho):
                for col in range(wo):
                    k = int(idx[ib, ic, r, col])
                    out[ib, ic, 2 * r + k // 2, 2 * col + k % 2] = float(x[ib, ic, r, col])
    return out


def upsample2x_ref(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=np.float64)
    for ib in range(n):
        for ic in range(c):
            for r in range(2 * h):
                for col in range(2 * w):
                    out[ib, ic, r, col] = float(x[ib, ic, r // 2, col // 2])
    return out


def cce_ref(logits, target):
    n, c, h, w = logits.shape
    total = 0.0
    for ib in range(n):
        for r in range(h):
            for col in range(w):
                zs = [float(logits[ib, ch, r, col]) for ch in range(c)]
                m = max(zs)
                lse = m + math.log(sum(math.exp(z - m) for z in zs))
                total += lse - zs[int(target[ib, r, col])]
    return total / (n * h * w)


def bce_ref(t, s, eps=1e-7):
    tf = t.reshape(-1)
    sf = s.reshape(-1)
    total = 0.0
    for i in range(tf.size):
        sv = min(max(float(sf[i]), eps), 1.0 - eps)
        tv = float(tf[i])
        total += tv * math.log(sv) + (1.0 - tv) * math.log(1.0 - sv)
    return -total / tf.size


def confusion_ref(pred, gt, k):
    tp = [0] * k
    fp = [0] * k
    fn = [0] * k
    gt_count = [0] * k
    pf = pred.reshape(-1)
    gf = gt.reshape(-1)
    for i in range(pf.size):
        p, g = int(pf[i]), int(gf[i])
        gt_count[g] += 1
        if p == g:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return tp, fp, fn, gt_count, pf.size


def iou_metrics_ref(pred, gt, k):
    tp, fp, fn, gt_count, total = confusion_ref(pred, gt, k)
    ious = []
    for c in range(k):
        denom = tp[c] + fp[c] + fn[c]
        ious.append(1.0 if denom == 0 else tp[c] / denom)
    m = sum(ious) / k
    fw = sum((gt_count[c] / total) * ious[c] for c in range(k))
    return ious, m, fw


def abe_rule_ref(probs, class_of_channel, threshold=0.5):
    """Per-pixel argmax-with-threshold decision, evaluated one pixel at a
    time (independent of the vectorized fusion path)."""
    n, m, h, w = probs.shape
    out = np.zeros((n, h, w), dtype=np.int64)
    for ib in range(n):
        for r in range(h):
            for col in range(w):
                best, karg = None, 0
                for ch in range(m):
                    v = float(probs[ib, ch, r, col])
                    if best is None or v > best:
                        best, karg = v, ch
                out[ib, r, col] = class_of_channel[karg] if best >= threshold else 0
    return out


def fd_gradient(loss_fn, param_array, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. every element of
    param_array (perturbed in place)."""
    grad = np.zeros_like(param_array, dtype=np.float64)
    flat = param_array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad
