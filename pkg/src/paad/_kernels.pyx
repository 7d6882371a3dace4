# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_fallback.py``.

Signatures and results match the numpy twins exactly; accumulation order in
``col2im`` follows the same (ki, kj) sweep so sums are bit-identical.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (n + 2 * p - k) // s + 1


def im2col(x, int k, int stride, int pad):
    if x.dtype == np.float32:
        return _im2col[float](np.ascontiguousarray(x), k, stride, pad, np.float32)
    return _im2col[double](np.ascontiguousarray(x, dtype=np.float64), k, stride, pad, np.float64)


cdef _im2col(real[:, :, :, ::1] x, int k, int stride, int pad, dtype):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, pad), Wo = _out_size(W, k, stride, pad)
    cdef Py_ssize_t K = C * k * k
    out = np.zeros((B, Ho * Wo, K), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, oh, ow, r, q, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    for c in range(C):
                        for i in range(k):
                            r = oh * stride + i - pad
                            if r < 0 or r >= H:
                                continue
                            for j in range(k):
                                q = ow * stride + j - pad
                                if q < 0 or q >= W:
                                    continue
                                col = (c * k + i) * k + j
                                o[b, oh * Wo + ow, col] = x[b, c, r, q]
    return out


def col2im(cols, tuple x_shape, int k, int stride, int pad):
    if cols.dtype == np.float32:
        return _col2im[float](np.ascontiguousarray(cols), x_shape, k, stride, pad, np.float32)
    return _col2im[double](np.ascontiguousarray(cols, dtype=np.float64), x_shape, k, stride, pad,
                           np.float64)


cdef _col2im(real[:, :, ::1] cols, tuple x_shape, int k, int stride, int pad, dtype):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, pad), Wo = _out_size(W, k, stride, pad)
    dx = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] d = dx
    cdef Py_ssize_t b, c, i, j, oh, ow, r, q, col
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        col = (c * k + i) * k + j
                        for oh in range(Ho):
                            r = oh * stride + i - pad
                            if r < 0 or r >= H:
                                continue
                            for ow in range(Wo):
                                q = ow * stride + j - pad
                                if q < 0 or q >= W:
                                    continue
                                d[b, c, r, q] += cols[b, oh * Wo + ow, col]
    return dx


def maxpool2(x):
    if x.dtype == np.float32:
        return _maxpool2[float](np.ascontiguousarray(x), np.float32)
    return _maxpool2[double](np.ascontiguousarray(x, dtype=np.float64), np.float64)


cdef _maxpool2(real[:, :, :, ::1] x, dtype):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    out = np.empty((B, C, Ho, Wo), dtype=dtype)
    arg = np.empty((B, C, Ho, Wo), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, c, i, j
    cdef real best, v
    cdef cnp.int8_t w
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[b, c, 2 * i, 2 * j]
                        w = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            w = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            w = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            w = 3
                        o[b, c, i, j] = best
                        a[b, c, i, j] = w
    return out, arg


def maxpool2_backward(dout, arg, tuple x_shape):
    if dout.dtype == np.float32:
        return _maxpool2_backward[float](np.ascontiguousarray(dout), np.ascontiguousarray(arg),
                                         x_shape, np.float32)
    return _maxpool2_backward[double](np.ascontiguousarray(dout, dtype=np.float64),
                                      np.ascontiguousarray(arg), x_shape, np.float64)


cdef _maxpool2_backward(real[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] arg, tuple x_shape,
                        dtype):
    dx = np.zeros(x_shape, dtype=dtype)
    cdef real[:, :, :, ::1] d = dx
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], Ho = dout.shape[2], Wo = dout.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef cnp.int8_t w
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        w = arg[b, c, i, j]
                        d[b, c, 2 * i + (w >> 1), 2 * j + (w & 1)] = dout[b, c, i, j]
    return dx


def ray_cast_core(double[::1] ux, double[::1] uy, double[::1] dx, double[::1] dy,
                  double[::1] r, double max_range):
    cdef Py_ssize_t n = ux.shape[0], m = dx.shape[0], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double best, proj, d2, disc, t
    with nogil:
        for i in range(n):
            best = INFINITY
            for j in range(m):
                d2 = dx[j] * dx[j] + dy[j] * dy[j]
                if d2 <= r[j] * r[j]:
                    t = 1e-3
                else:
                    proj = ux[i] * dx[j] + uy[i] * dy[j]
                    if proj <= 0:
                        continue
                    disc = proj * proj - (d2 - r[j] * r[j])
                    if disc < 0:
                        continue
                    t = proj - sqrt(disc)
                    if not t > 0:
                        continue
                if t < best:
                    best = t
            o[i] = best if best < max_range else max_range
    return out
