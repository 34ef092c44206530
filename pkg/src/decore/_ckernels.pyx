# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n * oh * ow, c * k * k), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, xx, row, col, sy, sx
    with nogil:
        for b in range(n):
            for y in range(oh):
                for xx in range(ow):
                    row = (b * oh + y) * ow + xx
                    for ch in range(c):
                        for i in range(k):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            for j in range(k):
                                sx = xx * stride + j - pad
                                if sx < 0 or sx >= w:
                                    continue
                                col = (ch * k + i) * k + j
                                out[row, col] = x[b, ch, sy, sx]
    return out_arr


def col2im(floating[:, ::1] cols, tuple x_shape, int k, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, xx, row
    # kernel offsets outermost: same summation order as the numpy fallback
    with nogil:
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for ch in range(c):
                        for y in range(oh):
                            for xx in range(ow):
                                row = (b * oh + y) * ow + xx
                                out[b, ch, y * stride + i, xx * stride + j] += cols[row, (ch * k + i) * k + j]
    if pad:
        out_arr = out_arr[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out_arr)


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, h, w), dtype=dtype)
    idx_arr = np.empty((n, c, h, w), dtype=np.uint8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, y, xx
    cdef floating best, v
    cdef cnp.uint8_t arg, t
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for xx in range(w):
                        best = x[b, ch, 2 * y, 2 * xx]
                        arg = 0
                        for t in range(1, 4):
                            v = x[b, ch, 2 * y + t // 2, 2 * xx + t % 2]
                            if v > best:
                                best = v
                                arg = t
                        out[b, ch, y, xx] = best
                        idx[b, ch, y, xx] = arg
    return out_arr, idx_arr


def maxpool2_backward(floating[:, :, :, ::1] dout, cnp.uint8_t[:, :, :, ::1] idx, tuple x_shape):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], h = dout.shape[2], w = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros(x_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, y, xx
    cdef int t
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for xx in range(w):
                        t = idx[b, ch, y, xx]
                        dx[b, ch, 2 * y + t // 2, 2 * xx + t % 2] = dout[b, ch, y, xx]
    return dx_arr
