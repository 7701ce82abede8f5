"""Pure-numpy implementations of the hot array kernels.

Convolution uses im2col + one BLAS matmul per batch; pooling, unpooling and
upsampling are reshape/scatter tricks. The native extension implements the
same signatures; results agree with these up to float rounding of the
reduction order, and each backend is deterministic on its own.

Pool indices are window-local flat positions: for a 2x2 window the value
``r * 2 + c`` with r, c in {0, 1}.
"""

import numpy as np


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    return dxp


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def conv2d_forward(x, w, b, stride=1, pad=0):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.reshape(n, ci, h * wd)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(w.reshape(co, -1), cols).reshape(n, co, ho, wo)
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, dy, stride=1, pad=0, need_dx=True, need_dw=True):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    _, _, ho, wo = dy.shape
    hp, wp = h + 2 * pad, wd + 2 * pad

    db = dy.sum(axis=(0, 2, 3))
    dyf = dy.reshape(n, co, ho * wo)

    dw = None
    if need_dw:
        xp = _pad(x, pad)
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            cols = x.reshape(n, ci, h * wd)
        else:
            cols = _im2col(xp, kh, kw, stride, ho, wo)
        dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(co, -1).T, dyf)
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            dx = np.ascontiguousarray(dcols.reshape(n, ci, h, wd))
        else:
            dxp = _col2im(dcols, n, ci, hp, wp, kh, kw, stride, ho, wo)
            dx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])
    return dx, dw, db


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(dy, idx):
    n, c, ho, wo = dy.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return np.ascontiguousarray(dx)


def unpool2x2_forward(x, idx):
    # scatter of x into 2x windows at the recorded argmax slots
    return maxpool2x2_backward(x, idx)


def unpool2x2_backward(dy, idx):
    n, c, h, w = dy.shape
    ho, wo = h // 2, w // 2
    win = dy.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    dx = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(dx)


def upsample2x_forward(x):
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def upsample2x_backward(dy):
    n, c, h, w = dy.shape
    return np.ascontiguousarray(dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)))
