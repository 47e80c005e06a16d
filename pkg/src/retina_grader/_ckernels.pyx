# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Loop nests mirror the numpy versions' accumulation order so both backends
produce bit-identical floats.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

NAME = "cython"


cpdef Py_ssize_t conv_out_size(Py_ssize_t size, Py_ssize_t kernel, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - kernel) // stride + 1


cpdef Py_ssize_t pool_out_size(Py_ssize_t size, Py_ssize_t window, Py_ssize_t stride):
    return (size - window) // stride + 1


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = conv_out_size(h, kh, sh, pad)
    cdef Py_ssize_t ow = conv_out_size(w, kw, sw, pad)
    out_arr = np.empty((c * kh * kw, n * oh * ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, b, i, j, row, col, y, xx
    with nogil:
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ci * kh + ki) * kw + kj
                    col = 0
                    for b in range(n):
                        for i in range(oh):
                            y = i * sh + ki - pad
                            for j in range(ow):
                                xx = j * sw + kj - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    out[row, col] = x[b, ci, y, xx]
                                else:
                                    out[row, col] = 0.0
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t pad):
    cdef Py_ssize_t oh = conv_out_size(h, kh, sh, pad)
    cdef Py_ssize_t ow = conv_out_size(w, kw, sw, pad)
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, b, i, j, row, col, y, xx
    with nogil:
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ci * kh + ki) * kw + kj
                    col = 0
                    for b in range(n):
                        for i in range(oh):
                            y = i * sh + ki - pad
                            for j in range(ow):
                                xx = j * sw + kj - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    out[b, ci, y, xx] += cols[row, col]
                                col += 1
    return out_arr


def max_pool_forward(const double[:, :, :, ::1] x, Py_ssize_t fy, Py_ssize_t fx,
                     Py_ssize_t sy, Py_ssize_t sx):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = pool_out_size(h, fy, sy)
    cdef Py_ssize_t ow = pool_out_size(w, fx, sx)
    out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ci, i, j, m, k, y, xx, besti
    cdef double best, v
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        y = i * sy
                        xx = j * sx
                        best = x[b, ci, y, xx]
                        besti = y * w + xx
                        for m in range(fy):
                            for k in range(fx):
                                v = x[b, ci, y + m, xx + k]
                                if v > best:
                                    best = v
                                    besti = (y + m) * w + xx + k
                        out[b, ci, i, j] = best
                        idx[b, ci, i, j] = besti
    return out_arr, idx_arr


def max_pool_backward(const double[:, :, :, ::1] grad, const cnp.int64_t[:, :, :, ::1] argmax,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], oh = grad.shape[2], ow = grad.shape[3]
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, a
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        a = argmax[b, ci, i, j]
                        out[b, ci, a // w, a % w] += grad[b, ci, i, j]
    return out_arr


def avg_pool_forward(const double[:, :, :, ::1] x, Py_ssize_t fy, Py_ssize_t fx,
                     Py_ssize_t sy, Py_ssize_t sx):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = pool_out_size(h, fy, sy)
    cdef Py_ssize_t ow = pool_out_size(w, fx, sx)
    out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, m, k
    cdef double acc
    cdef double area = <double>(fx * fy)
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        acc = 0.0
                        for m in range(fy):
                            for k in range(fx):
                                acc = acc + x[b, ci, i * sy + m, j * sx + k]
                        out[b, ci, i, j] = acc / area
    return out_arr


def avg_pool_backward(const double[:, :, :, ::1] grad, Py_ssize_t h, Py_ssize_t w,
                      Py_ssize_t fy, Py_ssize_t fx, Py_ssize_t sy, Py_ssize_t sx):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], oh = grad.shape[2], ow = grad.shape[3]
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, m, k
    cdef double area = <double>(fx * fy)
    with nogil:
        for m in range(fy):
            for k in range(fx):
                for b in range(n):
                    for ci in range(c):
                        for i in range(oh):
                            for j in range(ow):
                                out[b, ci, i * sy + m, j * sx + k] += grad[b, ci, i, j] / area
    return out_arr


# Morphology runs offset-major like the numpy twin: one pass over the image
# per structuring-element cell, with the border split off each row so the
# inner loops are branch-free and vectorisable.

cdef inline Py_ssize_t _clip(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    return lo if v < lo else (hi if v > hi else v)


cdef void _u8_combine(const cnp.uint8_t[:, ::1] a, cnp.uint8_t[:, ::1] out,
                      Py_ssize_t dy, Py_ssize_t dx, cnp.uint8_t fill, bint conj) noexcept nogil:
    """out[y, x] (&= if conj else |=) a[y + dy, x + dx], ``fill`` beyond the border."""
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1], y, x, py
    cdef Py_ssize_t x0 = _clip(-dx, 0, w), x1 = _clip(w - dx, x0, w)
    cdef cnp.uint8_t* dst
    cdef const cnp.uint8_t* src
    for y in range(h):
        dst = &out[y, 0]
        py = y + dy
        if py < 0 or py >= h:
            if conj and not fill:
                for x in range(w):
                    dst[x] = 0
            elif not conj and fill:
                for x in range(w):
                    dst[x] = 1
            continue
        src = &a[py, 0]
        if conj:
            if not fill:
                for x in range(x0):
                    dst[x] = 0
                for x in range(x1, w):
                    dst[x] = 0
            for x in range(x0, x1):
                dst[x] &= src[x + dx]
        else:
            if fill:
                for x in range(x0):
                    dst[x] = 1
                for x in range(x1, w):
                    dst[x] = 1
            for x in range(x0, x1):
                dst[x] |= src[x + dx]


cdef void _f64_combine(const double[:, ::1] a, double[:, ::1] out,
                       Py_ssize_t dy, Py_ssize_t dx, double fill, bint take_min) noexcept nogil:
    """out[y, x] = min or max of itself and a[y + dy, x + dx] (``fill`` beyond the border)."""
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1], y, x, py
    cdef Py_ssize_t x0 = _clip(-dx, 0, w), x1 = _clip(w - dx, x0, w)
    cdef double* dst
    cdef const double* src
    cdef double v
    for y in range(h):
        dst = &out[y, 0]
        py = y + dy
        if py < 0 or py >= h:
            for x in range(w):
                dst[x] = (fill if fill < dst[x] else dst[x]) if take_min else (fill if fill > dst[x] else dst[x])
            continue
        src = &a[py, 0]
        for x in range(x0):
            dst[x] = (fill if fill < dst[x] else dst[x]) if take_min else (fill if fill > dst[x] else dst[x])
        for x in range(x1, w):
            dst[x] = (fill if fill < dst[x] else dst[x]) if take_min else (fill if fill > dst[x] else dst[x])
        if take_min:
            for x in range(x0, x1):
                v = src[x + dx]
                dst[x] = v if v < dst[x] else dst[x]
        else:
            for x in range(x0, x1):
                v = src[x + dx]
                dst[x] = v if v > dst[x] else dst[x]


def binary_erode(const cnp.uint8_t[:, ::1] a, const cnp.uint8_t[:, ::1] se,
                 Py_ssize_t ay, Py_ssize_t ax, int outside):
    out_arr = np.ones((a.shape[0], a.shape[1]), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    cdef Py_ssize_t u, v
    with nogil:
        for u in range(se.shape[0]):
            for v in range(se.shape[1]):
                if se[u, v]:
                    _u8_combine(a, out, u - ay, v - ax, 1 if outside else 0, True)
    return out_arr


def binary_dilate(const cnp.uint8_t[:, ::1] a, const cnp.uint8_t[:, ::1] se,
                  Py_ssize_t ay, Py_ssize_t ax, int outside):
    out_arr = np.zeros((a.shape[0], a.shape[1]), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    cdef Py_ssize_t u, v
    with nogil:
        for u in range(se.shape[0]):
            for v in range(se.shape[1]):
                if se[u, v]:
                    _u8_combine(a, out, ay - u, ax - v, 1 if outside else 0, False)
    return out_arr


def gray_erode(const double[:, ::1] img, const cnp.uint8_t[:, ::1] se,
               Py_ssize_t ay, Py_ssize_t ax, double pad):
    out_arr = np.full((img.shape[0], img.shape[1]), np.inf)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t u, v
    with nogil:
        for u in range(se.shape[0]):
            for v in range(se.shape[1]):
                if se[u, v]:
                    _f64_combine(img, out, u - ay, v - ax, pad, True)
    return out_arr


def gray_dilate(const double[:, ::1] img, const cnp.uint8_t[:, ::1] se,
                Py_ssize_t ay, Py_ssize_t ax, double pad):
    out_arr = np.full((img.shape[0], img.shape[1]), -np.inf)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t u, v
    with nogil:
        for u in range(se.shape[0]):
            for v in range(se.shape[1]):
                if se[u, v]:
                    _f64_combine(img, out, ay - u, ax - v, pad, False)
    return out_arr
