# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels; same layout and summation order as _fallback."""
import numpy as np

from libc.string cimport memset

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _extent(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) noexcept nogil:
    return (n + 2 * p - k) // s + 1


cdef inline void _qrange(Py_ssize_t ow, Py_ssize_t sw, Py_ssize_t off, Py_ssize_t W,
                         Py_ssize_t* q0, Py_ssize_t* q1) noexcept nogil:
    # output columns q with 0 <= q*sw + off < W
    cdef Py_ssize_t lo = 0, hi
    if off < 0:
        lo = (-off + sw - 1) // sw
    if W - off <= 0:
        hi = 0
    else:
        hi = (W - off + sw - 1) // sw
    if hi > ow:
        hi = ow
    if lo > hi:
        lo = hi
    q0[0] = lo
    q1[0] = hi


cdef void _vol2col_impl(real* x, real* cols,
                        Py_ssize_t N, Py_ssize_t C, Py_ssize_t D, Py_ssize_t H, Py_ssize_t W,
                        Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                        Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                        Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw) noexcept nogil:
    cdef Py_ssize_t od = _extent(D, kd, sd, pd), oh = _extent(H, kh, sh, ph), ow = _extent(W, kw, sw, pw)
    cdef Py_ssize_t n, ch, a, b, c, z, y, q, iz, iy, q0, q1
    cdef real* src
    cdef real* dst = cols
    for n in range(N):
        for ch in range(C):
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        _qrange(ow, sw, c - pw, W, &q0, &q1)
                        for z in range(od):
                            iz = z * sd - pd + a
                            for y in range(oh):
                                iy = y * sh - ph + b
                                if iz < 0 or iz >= D or iy < 0 or iy >= H:
                                    memset(dst, 0, ow * sizeof(real))
                                else:
                                    src = x + (((n * C + ch) * D + iz) * H + iy) * W + c - pw
                                    for q in range(q0):
                                        dst[q] = 0
                                    if sw == 1:
                                        for q in range(q0, q1):
                                            dst[q] = src[q]
                                    else:
                                        for q in range(q0, q1):
                                            dst[q] = src[q * sw]
                                    for q in range(q1, ow):
                                        dst[q] = 0
                                dst += ow


cdef void _col2vol_impl(real* cols, real* x,
                        Py_ssize_t N, Py_ssize_t C, Py_ssize_t D, Py_ssize_t H, Py_ssize_t W,
                        Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                        Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                        Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw) noexcept nogil:
    cdef Py_ssize_t od = _extent(D, kd, sd, pd), oh = _extent(H, kh, sh, ph), ow = _extent(W, kw, sw, pw)
    cdef Py_ssize_t n, ch, a, b, c, z, y, q, iz, iy, q0, q1
    cdef real* dst
    cdef real* src = cols
    for n in range(N):
        for ch in range(C):
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        _qrange(ow, sw, c - pw, W, &q0, &q1)
                        for z in range(od):
                            iz = z * sd - pd + a
                            for y in range(oh):
                                iy = y * sh - ph + b
                                if not (iz < 0 or iz >= D or iy < 0 or iy >= H):
                                    dst = x + (((n * C + ch) * D + iz) * H + iy) * W + c - pw
                                    if sw == 1:
                                        for q in range(q0, q1):
                                            dst[q] += src[q]
                                    else:
                                        for q in range(q0, q1):
                                            dst[q * sw] += src[q]
                                src += ow


def _vol2col(real[:, :, :, :, ::1] x, real[:, :, ::1] cols, tuple k, tuple s, tuple p):
    cdef Py_ssize_t kd = k[0], kh = k[1], kw = k[2], sd = s[0], sh = s[1], sw = s[2]
    cdef Py_ssize_t pd = p[0], ph = p[1], pw = p[2]
    if x.shape[0] == 0 or cols.shape[2] == 0:
        return
    with nogil:
        _vol2col_impl(&x[0, 0, 0, 0, 0], &cols[0, 0, 0],
                      x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4],
                      kd, kh, kw, sd, sh, sw, pd, ph, pw)


def _col2vol(real[:, :, ::1] cols, real[:, :, :, :, ::1] x, tuple k, tuple s, tuple p):
    cdef Py_ssize_t kd = k[0], kh = k[1], kw = k[2], sd = s[0], sh = s[1], sw = s[2]
    cdef Py_ssize_t pd = p[0], ph = p[1], pw = p[2]
    if x.shape[0] == 0 or cols.shape[2] == 0:
        return
    with nogil:
        _col2vol_impl(&cols[0, 0, 0], &x[0, 0, 0, 0, 0],
                      x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4],
                      kd, kh, kw, sd, sh, sw, pd, ph, pw)


def vol2col(x, ksize, stride, pad):
    N, C, D, H, W = x.shape
    L = 1
    for n, k, s, p in zip((D, H, W), ksize, stride, pad):
        L *= (n + 2 * p - k) // s + 1
    x = np.ascontiguousarray(x)
    cols = np.empty((N, C * ksize[0] * ksize[1] * ksize[2], L), dtype=x.dtype)
    _vol2col(x, cols, tuple(ksize), tuple(stride), tuple(pad))
    return cols


def col2vol(cols, shape, ksize, stride, pad):
    cols = np.ascontiguousarray(cols)
    x = np.zeros(shape, dtype=cols.dtype)
    _col2vol(cols, x, tuple(ksize), tuple(stride), tuple(pad))
    return x
