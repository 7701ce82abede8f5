# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Native kernels for the array hot paths.

Convolution runs as hand-written im2col / col2im scatter-gather in C around
one BLAS gemm per image; pooling, unpooling and upsampling are direct loops.
Single-threaded BLAS calls aside, reduction order is fixed, so repeated runs
are bit-identical. Signatures mirror python_backend exactly.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _gemm(bint ta, bint tb, int m, int n, int k, real* a, int lda,
                real* b, int ldb, real beta, real* c, int ldc) noexcept nogil:
    """C = alpha*op(A)*op(B) + beta*C in column-major terms; callers phrase
    row-major products through the usual transpose identities."""
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    cdef float fone = 1.0, fbeta
    cdef double done = 1.0, dbeta
    if real is float:
        fbeta = <float>beta
        sgemm(&cta, &ctb, &m, &n, &k, &fone, <float*>a, &lda, <float*>b, &ldb,
              &fbeta, <float*>c, &ldc)
    else:
        dbeta = <double>beta
        dgemm(&cta, &ctb, &m, &n, &k, &done, <double*>a, &lda, <double*>b, &ldb,
              &dbeta, <double*>c, &ldc)


cdef void _im2col(real[:, :, :, ::1] xp, real[:, :, ::1] cols, Py_ssize_t ib,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    """cols[row, :] = kh*kw patches of image ib, rows ordered (ci, i, j)."""
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t ic, i, j, r, c, row
    for ic in range(ci):
        for i in range(kh):
            for j in range(kw):
                row = (ic * kh + i) * kw + j
                for r in range(ho):
                    for c in range(wo):
                        cols[ib, row, r * wo + c] = xp[ib, ic, r * stride + i, c * stride + j]


cdef void _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] dxp, Py_ssize_t ib,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t ci = dxp.shape[1]
    cdef Py_ssize_t ic, i, j, r, c, row
    for ic in range(ci):
        for i in range(kh):
            for j in range(kw):
                row = (ic * kh + i) * kw + j
                for r in range(ho):
                    for c in range(wo):
                        dxp[ib, ic, r * stride + i, c * stride + j] += cols[ib, row, r * wo + c]


def conv2d_forward(x, w, b, int stride=1, int pad=0):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    return _conv2d_forward(x, w, None if b is None else np.ascontiguousarray(b, dtype=x.dtype),
                           stride, pad)


def _conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, b, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t L = ho * wo, ckk = ci * kh * kw
    dtype = np.float32 if real is float else np.float64

    cdef real[:, :, :, ::1] xp
    if pad > 0:
        xp_arr = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=dtype)
        xp_arr[:, :, pad:pad + h, pad:pad + wd] = np.asarray(x)
        xp = xp_arr
    else:
        xp = x

    cols_arr = np.empty((n, ckk, L), dtype=dtype)
    y_arr = np.empty((n, co, L), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef real[:, :, ::1] y = y_arr
    cdef Py_ssize_t ib
    with nogil:
        for ib in range(n):
            _im2col(xp, cols, ib, kh, kw, stride, ho, wo)
            # y_ib(co, L) = w(co, ckk) @ cols_ib(ckk, L), phrased column-major
            _gemm(False, False, <int>L, <int>co, <int>ckk, &cols[ib, 0, 0], <int>L,
                  &w[0, 0, 0, 0], <int>ckk, <real>0.0, &y[ib, 0, 0], <int>L)
    out = y_arr.reshape(n, co, ho, wo)
    if b is not None:
        out += np.asarray(b).reshape(1, co, 1, 1)
    return out


def conv2d_backward(x, w, dy, int stride=1, int pad=0, bint need_dx=True, bint need_dw=True):
    x = np.ascontiguousarray(x)
    return _conv2d_backward(x, np.ascontiguousarray(w, dtype=x.dtype),
                            np.ascontiguousarray(dy, dtype=x.dtype), stride, pad,
                            need_dx, need_dw)


def _conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[:, :, :, ::1] dy,
                     int stride, int pad, bint need_dx, bint need_dw):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t hp = h + 2 * pad, wp = wd + 2 * pad
    cdef Py_ssize_t L = ho * wo, ckk = ci * kh * kw
    dtype = np.float32 if real is float else np.float64

    db_arr = np.asarray(dy).sum(axis=(0, 2, 3))

    cdef real[:, :, :, ::1] xp
    if pad > 0:
        xp_arr = np.zeros((n, ci, hp, wp), dtype=dtype)
        xp_arr[:, :, pad:pad + h, pad:pad + wd] = np.asarray(x)
        xp = xp_arr
    else:
        xp = x

    cols_arr = np.empty((n, ckk, L), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef real[:, :, :, ::1] dyv = dy

    dw_arr = np.zeros((co, ci, kh, kw), dtype=dtype) if need_dw else None
    dxp_arr = np.zeros((n, ci, hp, wp), dtype=dtype) if need_dx else None
    dcols_arr = np.empty((n, ckk, L), dtype=dtype) if need_dx else None
    cdef real[:, :, :, ::1] dwv
    cdef real[:, :, :, ::1] dxp
    cdef real[:, :, ::1] dcols
    cdef Py_ssize_t ib
    cdef real beta

    with nogil:
        for ib in range(n):
            _im2col(xp, cols, ib, kh, kw, stride, ho, wo)
    if need_dw:
        dwv = dw_arr
        with nogil:
            for ib in range(n):
                # dw(co, ckk) += dy_ib(co, L) @ cols_ib(ckk, L)^T
                beta = <real>0.0 if ib == 0 else <real>1.0
                _gemm(True, False, <int>ckk, <int>co, <int>L, &cols[ib, 0, 0], <int>L,
                      &dyv[ib, 0, 0, 0], <int>L, beta, &dwv[0, 0, 0, 0], <int>ckk)
    if need_dx:
        dxp = dxp_arr
        dcols = dcols_arr
        with nogil:
            for ib in range(n):
                # dcols_ib(ckk, L) = w(co, ckk)^T @ dy_ib(co, L)
                _gemm(False, True, <int>L, <int>ckk, <int>co, &dyv[ib, 0, 0, 0], <int>L,
                      &w[0, 0, 0, 0], <int>ckk, <real>0.0, &dcols[ib, 0, 0], <int>L)
                _col2im(dcols, dxp, ib, kh, kw, stride, ho, wo)

    dx_arr = None
    if need_dx:
        if pad > 0:
            dx_arr = np.ascontiguousarray(dxp_arr[:, :, pad:pad + h, pad:pad + wd])
        else:
            dx_arr = dxp_arr
    return dx_arr, dw_arr, db_arr


def maxpool2x2_forward(x):
    return _maxpool2x2_forward(np.ascontiguousarray(x))


def _maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = y_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ib, ic, r, col, a, bpos
    cdef real best, v
    cdef unsigned char k
    with nogil:
        for ib in range(n):
            for ic in range(c):
                for r in range(ho):
                    for col in range(wo):
                        best = x[ib, ic, 2 * r, 2 * col]
                        k = 0
                        v = x[ib, ic, 2 * r, 2 * col + 1]
                        if v > best:
                            best = v; k = 1
                        v = x[ib, ic, 2 * r + 1, 2 * col]
                        if v > best:
                            best = v; k = 2
                        v = x[ib, ic, 2 * r + 1, 2 * col + 1]
                        if v > best:
                            best = v; k = 3
                        y[ib, ic, r, col] = best
                        idx[ib, ic, r, col] = k
    return y_arr, idx_arr


def maxpool2x2_backward(dy, idx):
    return _scatter2x2(np.ascontiguousarray(dy), np.ascontiguousarray(idx))


def unpool2x2_forward(x, idx):
    return _scatter2x2(np.ascontiguousarray(x), np.ascontiguousarray(idx))


def _scatter2x2(real[:, :, :, ::1] src, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = src.shape[0], c = src.shape[1], ho = src.shape[2], wo = src.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, r, col
    cdef unsigned char k
    with nogil:
        for ib in range(n):
            for ic in range(c):
                for r in range(ho):
                    for col in range(wo):
                        k = idx[ib, ic, r, col]
                        out[ib, ic, 2 * r + (k >> 1), 2 * col + (k & 1)] = src[ib, ic, r, col]
    return out_arr


def unpool2x2_backward(dy, idx):
    return _gather2x2(np.ascontiguousarray(dy), np.ascontiguousarray(idx))


def _gather2x2(real[:, :, :, ::1] dy, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1], h = dy.shape[2], w = dy.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, r, col
    cdef unsigned char k
    with nogil:
        for ib in range(n):
            for ic in range(c):
                for r in range(ho):
                    for col in range(wo):
                        k = idx[ib, ic, r, col]
                        out[ib, ic, r, col] = dy[ib, ic, 2 * r + (k >> 1), 2 * col + (k & 1)]
    return out_arr


def upsample2x_forward(x):
    return _upsample2x_forward(np.ascontiguousarray(x))


def _upsample2x_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, r, col
    cdef real v
    with nogil:
        for ib in range(n):
            for ic in range(c):
                for r in range(h):
                    for col in range(w):
                        v = x[ib, ic, r, col]
                        out[ib, ic, 2 * r, 2 * col] = v
                        out[ib, ic, 2 * r, 2 * col + 1] = v
                        out[ib, ic, 2 * r + 1, 2 * col] = v
                        out[ib, ic, 2 * r + 1, 2 * col + 1] = v
    return out_arr


def upsample2x_backward(dy):
    return _upsample2x_backward(np.ascontiguousarray(dy))


def _upsample2x_backward(real[:, :, :, ::1] dy):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1], h = dy.shape[2], w = dy.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, r, col
    with nogil:
        for ib in range(n):
            for ic in range(c):
                for r in range(ho):
                    for col in range(wo):
                        out[ib, ic, r, col] = (dy[ib, ic, 2 * r, 2 * col] + dy[ib, ic, 2 * r, 2 * col + 1]
                                               + dy[ib, ic, 2 * r + 1, 2 * col] + dy[ib, ic, 2 * r + 1, 2 * col + 1])
    return out_arr
