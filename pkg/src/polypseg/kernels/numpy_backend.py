"""Pure-numpy convolution kernels (fallback backend).

The forward pass accumulates one kernel tap at a time, looping channels
then kernel rows then kernel cols, entirely in float32.  That fixed
(channel, ky, kx) accumulation order is the contract shared with the
compiled backend and with the naive reference loop used by the tests, so
forward outputs are bitwise identical no matter which backend is active.
Backward passes have no bitwise contract (only a tolerance one) and use
BLAS-backed tensordot for speed; they are still deterministic run to run.
"""

import numpy as np

name = "numpy"


def conv2d_forward(xp, w, stride, dilation, oh, ow):
    """Convolve pre-padded input ``xp`` (n,ci,hp,wp) with ``w`` (co,ci,kh,kw)."""
    n = xp.shape[0]
    co, ci, kh, kw = w.shape
    out = np.zeros((n, co, oh, ow), dtype=np.float32)
    for c in range(ci):
        xc = xp[:, c]
        for u in range(kh):
            y0 = u * dilation
            for v in range(kw):
                x0 = v * dilation
                xs = xc[:, y0 : y0 + (oh - 1) * stride + 1 : stride,
                        x0 : x0 + (ow - 1) * stride + 1 : stride]
                out += xs[:, None, :, :] * w[:, c, u, v].reshape(1, co, 1, 1)
    return out


def conv2d_backward_input(gy, w, xp_shape, stride, dilation):
    """Gradient w.r.t. the padded input."""
    co, ci, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    dxp = np.zeros(xp_shape, dtype=np.float32)
    for c in range(ci):
        for u in range(kh):
            y0 = u * dilation
            for v in range(kw):
                x0 = v * dilation
                contrib = np.tensordot(gy, w[:, c, u, v], axes=([1], [0]))
                dxp[:, c, y0 : y0 + (oh - 1) * stride + 1 : stride,
                    x0 : x0 + (ow - 1) * stride + 1 : stride] += contrib
    return dxp


def conv2d_backward_weight(gy, xp, w_shape, stride, dilation):
    """Gradient w.r.t. the kernel."""
    co, ci, kh, kw = w_shape
    oh, ow = gy.shape[2], gy.shape[3]
    dw = np.empty(w_shape, dtype=np.float32)
    for c in range(ci):
        xc = xp[:, c]
        for u in range(kh):
            y0 = u * dilation
            for v in range(kw):
                x0 = v * dilation
                xs = xc[:, y0 : y0 + (oh - 1) * stride + 1 : stride,
                        x0 : x0 + (ow - 1) * stride + 1 : stride]
                dw[:, c, u, v] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 1, 2]))
    return dw
