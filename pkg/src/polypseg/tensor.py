"""Rank-4 float32 tensors with tape-based reverse-mode differentiation.

Everything the segmentation model needs runs through this module: dilated
convolution, batch normalization, ReLU, max pooling, bilinear upsampling,
channel concatenation, elementwise addition, and the sigmoid
cross-entropy loss.  Tensors are immutable once produced by an op; ops
are pure except for recording a backward closure on the active
:class:`Tape`.  Gradients accumulate additively into ``.grad`` and the
caller zeroes them between optimizer steps.

Determinism contract: one conv2d output element is the float32 sum of
``x * w`` products taken in (channel, ky, kx) order, so results are
bitwise reproducible and backend-independent.  Every public op checks its
output for NaN/Inf and raises :class:`NumericError` instead of letting a
non-finite value escape.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels as _K
from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "ConvSpec",
    "Tape",
    "backward",
    "effective_field_of_view",
    "conv_output_size",
    "conv2d",
    "batch_norm2d",
    "relu",
    "max_pool2d",
    "bilinear_upsample",
    "bilinear_resize_array",
    "concat_channels",
    "add",
    "sigmoid_bce_loss",
    "masked_sum",
]


def effective_field_of_view(k, r):
    """Spatial extent covered by a k-wide kernel sampled with dilation r."""
    if k < 1 or r < 1:
        raise ValueError(f"kernel size and dilation must be >= 1, got k={k}, r={r}")
    return k + (k - 1) * (r - 1)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution: kernel, stride, dilation, padding."""

    kernel: tuple
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ShapeError(f"kernel dims must be positive, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    @property
    def effective_extent(self):
        """(height, width) the dilated kernel spans on the input grid."""
        kh, kw = self.kernel
        return (effective_field_of_view(kh, self.dilation),
                effective_field_of_view(kw, self.dilation))


def conv_output_size(size, k, stride, dilation, padding):
    """Output length along one axis; raises if the window does not fit."""
    eff = effective_field_of_view(k, dilation)
    padded = size + 2 * padding
    if padded < eff:
        raise ShapeError(
            f"padded extent {padded} (size {size} + 2*{padding}) is smaller than "
            f"the effective kernel extent {eff} (k={k}, r={dilation})"
        )
    out = (padded - eff) // stride + 1
    if out < 1:
        raise ShapeError(f"convolution produces a zero-size output axis (size {size})")
    return out


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Dense (batch, channel, height, width) float32 array with a grad slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (n,c,h,w); got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN/Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @staticmethod
    def channel_vector(values, requires_grad=False):
        """Wrap a length-c vector as a (1,c,1,1) tensor (bias, gamma, beta...)."""
        v = np.asarray(values, dtype=np.float32).reshape(-1)
        return Tensor(v.reshape(1, v.size, 1, 1), requires_grad=requires_grad)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, arr):
        if arr.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {arr.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = arr.astype(np.float32, copy=True)
        else:
            self.grad += arr

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager around the forward computation, then call
    :func:`backward` (or ``tape.backward``) on the scalar loss.  Replaying
    in reverse recording order visits every recorded op exactly once; a
    tape can be replayed only once.
    """

    def __init__(self):
        self._records = []
        self._output_ids = set()
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, backward_fn, out):
        self._records.append(backward_fn)
        self._output_ids.add(id(out))

    def backward(self, loss):
        if self._consumed:
            raise RuntimeError("tape already replayed; rerun the forward pass first")
        if not self._records:
            raise RuntimeError("backward called on an empty tape (no forward recorded)")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("backward expects a scalar (1,1,1,1) loss tensor")
        if id(loss) not in self._output_ids:
            raise RuntimeError("loss was not produced under this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def backward(tape, loss):
    """Replay ``tape`` in reverse, accumulating gradients from ``loss``."""
    tape.backward(loss)


def _record(out, *inputs):
    """Return the active tape if this op should record, else None."""
    tape = _active_tape()
    if tape is None:
        return None
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return None
    out.requires_grad = True
    return tape


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, bias=None, spec=ConvSpec((3, 3))):
    """2-D (optionally dilated) convolution of x (n,ci,h,w) with w (co,ci,kh,kw).

    Each output element is the dot product of the dilation-sampled input
    window with the kernel, plus bias.  With dilation 1 this is the
    standard convolution.
    """
    n, ci, h, ww = x.shape
    co, wci, kh, kw = w.shape
    if (kh, kw) != tuple(spec.kernel):
        raise ShapeError(f"weight kernel dims {(kh, kw)} disagree with spec {spec.kernel}")
    if ci != wci:
        raise ShapeError(f"input has {ci} channels but weight expects {wci}")
    if bias is not None and bias.data.size != co:
        raise ShapeError(f"bias has {bias.data.size} entries for {co} output channels")
    s, r, p = spec.stride, spec.dilation, spec.padding
    oh = conv_output_size(h, kh, s, r, p)
    ow = conv_output_size(ww, kw, s, r, p)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    y = _K.conv2d_forward(xp, w.data, s, r, oh, ow)
    if bias is not None:
        y += bias.data.reshape(1, co, 1, 1)
    _check_finite(y, "conv2d")
    out = Tensor(y)

    tape = _record(out, x, w, bias)
    if tape is not None:
        def _back():
            gy = out.grad
            if x.requires_grad:
                dxp = _K.conv2d_backward_input(gy, w.data, xp.shape, s, r)
                if p:
                    dxp = dxp[:, :, p:p + h, p:p + ww]
                x.accumulate_grad(np.ascontiguousarray(dxp))
            if w.requires_grad:
                dw = _K.conv2d_backward_weight(gy, xp, w.data.shape, s, r)
                w.accumulate_grad(dw)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(gy.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))
        tape.record(_back, out)
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                 eps=1e-5, momentum=0.1):
    """Per-channel normalization; batch stats in training, running stats in eval.

    ``running_mean``/``running_var`` are plain float32 arrays of length c,
    updated in place during training with the population batch statistics.
    """
    n, c, h, w = x.shape
    for nm, v in (("gamma", gamma.data), ("beta", beta.data)):
        if v.size != c:
            raise ShapeError(f"{nm} has {v.size} entries for {c} channels")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"running stats must have shape ({c},)")

    if training:
        mu64 = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var64 = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        mu = mu64.astype(np.float32)
        var = var64.astype(np.float32)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mu = running_mean
        var = running_var

    inv = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(np.float32)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.data * xhat + beta.data
    _check_finite(y, "batch_norm2d")
    out = Tensor(y)

    tape = _record(out, x, gamma, beta)
    if tape is not None:
        m = n * h * w
        def _back():
            gy = out.grad
            dbeta = gy.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dgamma = (gy * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            if beta.requires_grad:
                beta.accumulate_grad(dbeta)
            if gamma.requires_grad:
                gamma.accumulate_grad(dgamma)
            if x.requires_grad:
                gi = gamma.data * inv.reshape(1, c, 1, 1)
                if training:
                    dx = (gi / m) * (m * gy - dbeta - xhat * dgamma)
                else:
                    dx = gi * gy
                x.accumulate_grad(dx.astype(np.float32))
        tape.record(_back, out)
    return out


# ---------------------------------------------------------------------------
# activations, pooling, resampling


def relu(x):
    y = np.maximum(x.data, np.float32(0))
    out = Tensor(y)
    tape = _record(out, x)
    if tape is not None:
        mask = (x.data > 0)
        def _back():
            if x.requires_grad:
                x.accumulate_grad(out.grad * mask)
        tape.record(_back, out)
    return out


def max_pool2d(x, kernel=3, stride=2, padding=1):
    """Max pooling; ties go to the first tap in row-major window order."""
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d produces empty output for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=np.float32(-np.inf))
    best = None
    arg = None
    taps = [(u, v) for u in range(kernel) for v in range(kernel)]
    for t, (u, v) in enumerate(taps):
        xs = xp[:, :, u : u + (oh - 1) * stride + 1 : stride,
                v : v + (ow - 1) * stride + 1 : stride]
        if best is None:
            best = xs.copy()
            arg = np.zeros(best.shape, dtype=np.int8)
        else:
            m = xs > best
            np.copyto(best, xs, where=m)
            arg[m] = t
    _check_finite(best, "max_pool2d")
    out = Tensor(best)

    tape = _record(out, x)
    if tape is not None:
        def _back():
            if not x.requires_grad:
                return
            gy = out.grad
            dxp = np.zeros(xp.shape, dtype=np.float32)
            for t, (u, v) in enumerate(taps):
                sel = (arg == t)
                dxp[:, :, u : u + (oh - 1) * stride + 1 : stride,
                    v : v + (ow - 1) * stride + 1 : stride] += gy * sel
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x.accumulate_grad(np.ascontiguousarray(dxp))
        tape.record(_back, out)
    return out


def _bilinear_axis(src, dst):
    """Per-axis source indices and weights for half-pixel interpolation."""
    coords = ((np.arange(dst, dtype=np.float64) + 0.5) * src) / dst - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, frac


def _bilinear_plan(src_hw, dst_hw):
    h, w = src_hw
    oh, ow = dst_hw
    y0, y1, fy = _bilinear_axis(h, oh)
    x0, x1, fx = _bilinear_axis(w, ow)
    weights = (((1 - fy)[:, None] * (1 - fx)[None, :]).astype(np.float32),
               ((1 - fy)[:, None] * fx[None, :]).astype(np.float32),
               (fy[:, None] * (1 - fx)[None, :]).astype(np.float32),
               (fy[:, None] * fx[None, :]).astype(np.float32))
    return (y0, y1, x0, x1), weights


def bilinear_resize_array(data, out_hw):
    """Half-pixel bilinear resampling of a plain (n,c,h,w) float32 array.

    Shared by the autodiff upsampling op and by dataset resizing so the
    two paths stay bitwise identical.
    """
    n, c, h, w = data.shape
    (y0, y1, x0, x1), (w00, w01, w10, w11) = _bilinear_plan((h, w), out_hw)
    yy0, yy1 = y0[:, None], y1[:, None]
    xx0, xx1 = x0[None, :], x1[None, :]
    return (w00 * data[:, :, yy0, xx0] + w01 * data[:, :, yy0, xx1]
            + w10 * data[:, :, yy1, xx0] + w11 * data[:, :, yy1, xx1])


def bilinear_upsample(x, scale):
    """Upsample (n,c,h,w) to (n,c,h*scale,w*scale), half-pixel convention.

    Sample coordinates follow src = (dst + 0.5)/scale - 0.5, clamped to
    the borders; scale 1 is the identity.
    """
    if int(scale) != scale or scale < 1:
        raise ShapeError(f"scale must be a positive integer, got {scale!r}")
    scale = int(scale)
    n, c, h, w = x.shape
    oh, ow = h * scale, w * scale
    (y0, y1, x0, x1), (w00, w01, w10, w11) = _bilinear_plan((h, w), (oh, ow))
    yy0, yy1 = y0[:, None], y1[:, None]
    xx0, xx1 = x0[None, :], x1[None, :]
    d = x.data
    y = (w00 * d[:, :, yy0, xx0] + w01 * d[:, :, yy0, xx1]
         + w10 * d[:, :, yy1, xx0] + w11 * d[:, :, yy1, xx1])
    _check_finite(y, "bilinear_upsample")
    out = Tensor(y)

    tape = _record(out, x)
    if tape is not None:
        flat00 = (yy0 * w + xx0).ravel()
        flat01 = (yy0 * w + xx1).ravel()
        flat10 = (yy1 * w + xx0).ravel()
        flat11 = (yy1 * w + xx1).ravel()
        idx = np.concatenate([flat00, flat01, flat10, flat11])
        def _back():
            if not x.requires_grad:
                return
            gy = out.grad
            dx = np.empty((n, c, h, w), dtype=np.float32)
            for b in range(n):
                for ch in range(c):
                    g = gy[b, ch]
                    vals = np.concatenate([(g * w00).ravel(), (g * w01).ravel(),
                                           (g * w10).ravel(), (g * w11).ravel()])
                    dx[b, ch] = np.bincount(idx, weights=vals, minlength=h * w)\
                        .reshape(h, w).astype(np.float32)
            x.accumulate_grad(dx)
        tape.record(_back, out)
    return out


def concat_channels(inputs):
    """Concatenate tensors along the channel axis, preserving input order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for i, t in enumerate(inputs):
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(
                f"concat input {i} has (n,h,w)=({tn},{th},{tw}), expected ({n},{h},{w})"
            )
    y = np.concatenate([t.data for t in inputs], axis=1)
    out = Tensor(y)
    tape = _record(out, *inputs)
    if tape is not None:
        splits = np.cumsum([t.shape[1] for t in inputs])[:-1]
        def _back():
            parts = np.split(out.grad, splits, axis=1)
            for t, g in zip(inputs, parts):
                if t.requires_grad:
                    t.accumulate_grad(np.ascontiguousarray(g))
        tape.record(_back, out)
    return out


def add(a, b):
    """Elementwise sum of two same-shape tensors (residual shortcut)."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    tape = _record(out, a, b)
    if tape is not None:
        def _back():
            if a.requires_grad:
                a.accumulate_grad(out.grad)
            if b.requires_grad:
                b.accumulate_grad(out.grad)
        tape.record(_back, out)
    return out


# ---------------------------------------------------------------------------
# loss


def _as_target_array(targets, shape):
    t = np.asarray(targets)
    if t.ndim == 3:
        t = t[:, None, :, :]
    if t.shape != shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {shape}")
    return t.astype(np.float32)


def sigmoid_bce_loss(logits, targets):
    """Mean per-pixel binary cross-entropy on raw logits.

    Computed in the stable form max(z,0) - z*t + log(1+exp(-|z|)) with
    float64 reduction, so saturated logits cannot overflow.
    """
    t = _as_target_array(targets, logits.shape)
    z = logits.data.astype(np.float64)
    per_px = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    mean = per_px.mean()
    if not np.isfinite(mean):
        raise NumericError("sigmoid_bce_loss produced a non-finite value")
    out = Tensor(np.full((1, 1, 1, 1), mean, dtype=np.float32))

    tape = _record(out, logits)
    if tape is not None:
        npx = logits.data.size
        def _back():
            if not logits.requires_grad:
                return
            g = float(out.grad.reshape(()))
            sig = 1.0 / (1.0 + np.exp(-z))
            dz = ((sig - t) * (g / npx)).astype(np.float32)
            logits.accumulate_grad(dz)
        tape.record(_back, out)
    return out


def masked_sum(x, weights):
    """Weighted scalar reduction sum(x * weights); used by probing tools."""
    wts = np.asarray(weights, dtype=np.float64)
    if wts.shape != x.data.shape:
        raise ShapeError(f"weights shape {wts.shape} != tensor shape {x.data.shape}")
    val = float((x.data.astype(np.float64) * wts).sum())
    if not np.isfinite(val):
        raise NumericError("masked_sum produced a non-finite value")
    out = Tensor(np.full((1, 1, 1, 1), val, dtype=np.float32))
    tape = _record(out, x)
    if tape is not None:
        w32 = wts.astype(np.float32)
        def _back():
            if x.requires_grad:
                g = float(out.grad.reshape(()))
                x.accumulate_grad(w32 * np.float32(g))
        tape.record(_back, out)
    return out
