"""Backend selection for the convolution hot path.

The compiled Cython kernels are preferred when the extension built; the
pure-numpy backend is the fallback.  Set POLYPSEG_BACKEND=numpy (or call
:func:`set_backend`) to force the fallback, e.g. for benchmarking.  Both
backends produce bitwise-identical forward outputs; see numpy_backend for
the accumulation-order contract that makes this hold.
"""

import os

from . import numpy_backend

try:
    from . import _convcore
except ImportError:
    _convcore = None

_active = numpy_backend
if _convcore is not None and os.environ.get("POLYPSEG_BACKEND", "") != "numpy":
    _active = _convcore


def available_backends():
    out = {"numpy": numpy_backend}
    if _convcore is not None:
        out["compiled"] = _convcore
    return out


def backend_name():
    return _active.name


def set_backend(name):
    """Switch the active backend ("numpy" or "compiled")."""
    global _active
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(backends)}")
    _active = backends[name]


def conv2d_forward(xp, w, stride, dilation, oh, ow):
    return _active.conv2d_forward(xp, w, stride, dilation, oh, ow)


def conv2d_backward_input(gy, w, xp_shape, stride, dilation):
    return _active.conv2d_backward_input(gy, w, xp_shape, stride, dilation)


def conv2d_backward_weight(gy, xp, w_shape, stride, dilation):
    return _active.conv2d_backward_weight(gy, xp, w_shape, stride, dilation)
