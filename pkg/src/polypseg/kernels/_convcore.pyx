# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

Forward accumulation runs per output element in (channel, ky, kx) order
with a float32 accumulator, matching the numpy backend bit for bit.
Compiled without -ffast-math on purpose: reassociation would break that
contract.  Weight gradients accumulate in float64 before the final cast.
"""

import numpy as np

cimport numpy as cnp

name = "compiled"


def conv2d_forward(cnp.float32_t[:, :, :, ::1] xp,
                   cnp.float32_t[:, :, :, ::1] w,
                   int stride, int dilation, int oh, int ow):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t ci = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2]
    cdef Py_ssize_t kw = w.shape[3]
    out_arr = np.zeros((n, co, oh, ow), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, u, v, i, j, ybase, xbase
    cdef float wv
    for b in range(n):
        for o in range(co):
            for c in range(ci):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        ybase = u * dilation
                        xbase = v * dilation
                        for i in range(oh):
                            for j in range(ow):
                                out[b, o, i, j] = out[b, o, i, j] + wv * xp[b, c, i * stride + ybase, j * stride + xbase]
    return out_arr


def conv2d_backward_input(cnp.float32_t[:, :, :, ::1] gy,
                          cnp.float32_t[:, :, :, ::1] w,
                          xp_shape, int stride, int dilation):
    cdef Py_ssize_t n = gy.shape[0]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t ci = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2]
    cdef Py_ssize_t kw = w.shape[3]
    cdef Py_ssize_t oh = gy.shape[2]
    cdef Py_ssize_t ow = gy.shape[3]
    dxp_arr = np.zeros(xp_shape, dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] dxp = dxp_arr
    cdef Py_ssize_t b, o, c, u, v, i, j, ybase, xbase, yrow
    cdef float wv
    for b in range(n):
        for c in range(ci):
            for o in range(co):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        ybase = u * dilation
                        xbase = v * dilation
                        for i in range(oh):
                            yrow = i * stride + ybase
                            for j in range(ow):
                                dxp[b, c, yrow, j * stride + xbase] = dxp[b, c, yrow, j * stride + xbase] + wv * gy[b, o, i, j]
    return dxp_arr


def conv2d_backward_weight(cnp.float32_t[:, :, :, ::1] gy,
                           cnp.float32_t[:, :, :, ::1] xp,
                           w_shape, int stride, int dilation):
    cdef Py_ssize_t n = gy.shape[0]
    cdef Py_ssize_t oh = gy.shape[2]
    cdef Py_ssize_t ow = gy.shape[3]
    cdef Py_ssize_t co = w_shape[0]
    cdef Py_ssize_t ci = w_shape[1]
    cdef Py_ssize_t kh = w_shape[2]
    cdef Py_ssize_t kw = w_shape[3]
    dw_arr = np.empty((co, ci, kh, kw), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t b, o, c, u, v, i, j, ybase, xbase, yrow
    cdef double acc
    for o in range(co):
        for c in range(ci):
            for u in range(kh):
                for v in range(kw):
                    ybase = u * dilation
                    xbase = v * dilation
                    acc = 0.0
                    for b in range(n):
                        for i in range(oh):
                            yrow = i * stride + ybase
                            for j in range(ow):
                                acc += gy[b, o, i, j] * xp[b, c, yrow, j * stride + xbase]
                    dw[o, c, u, v] = <float> acc
    return dw_arr
