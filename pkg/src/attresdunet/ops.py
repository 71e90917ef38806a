"""Forward operations with their backward rules.

All spatial ops take and return ``(N, C, H, W)`` tensors. Convolution is
cross-correlation with zero padding. Binary elementwise ops accept equal
shapes, a single-channel map ``(N, 1, H, W)`` broadcast over channels, or a
per-channel vector ``(N, C, 1, 1)`` broadcast over space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DTYPE, ShapeError, Tensor, from_op

_AXES = ("N", "C", "H", "W")
# sigmoid outputs are kept strictly inside (0, 1) at float32 resolution
_SIGMOID_EPS = float(np.float32(2.0**-24))


def _check_4d(x: Tensor, name: str = "input") -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N,C,H,W), got shape {x.shape}")


def _conv_out(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# --------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation via im2col + matmul.

    Args:
        x: input ``(N, Cin, H, W)``.
        weight: kernel ``(Cout, Cin, Kh, Kw)``.
        bias: optional ``(Cout,)``.
        stride, padding, dilation: applied identically on both spatial axes.
    """
    _check_4d(x)
    if weight.data.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (Cout,Cin,Kh,Kw), got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"input has {c} channels but kernel expects {cin}", axis="C")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels", axis="C")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride}, padding={padding}, dilation={dilation}")
    ho = _conv_out(h, kh, stride, padding, dilation)
    wo = _conv_out(w, kw, stride, padding, dilation)
    if ho <= 0:
        raise ShapeError(f"convolution output height is {ho}", axis="H")
    if wo <= 0:
        raise ShapeError(f"convolution output width is {wo}", axis="W")

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        sn, sc, sh, sw = xp.strides
        win = as_strided(
            xp,
            shape=(n, c, kh, kw, ho, wo),
            strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
            writeable=False,
        )
        cols = np.ascontiguousarray(win).reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g: np.ndarray):
        gm = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)
            if pointwise:
                gx = dcols.reshape(n, c, h, w)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
                h_span = stride * (ho - 1) + 1
                w_span = stride * (wo - 1) + 1
                for i in range(kh):
                    r0 = i * dilation
                    for j in range(kw):
                        c0 = j * dilation
                        dxp[:, :, r0:r0 + h_span:stride, c0:c0 + w_span:stride] += dcols[:, :, i, j]
                gx = dxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, parents, backward, "conv2d")


# --------------------------------------------------------------------------
# pooling / resampling


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window x window`` patches; argmax indices kept for backward.

    Ties resolve to the first maximum in row-major window order.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if window > h:
        raise ShapeError(f"pool window {window} larger than input height {h}", axis="H")
    if window > w:
        raise ShapeError(f"pool window {window} larger than input width {w}", axis="W")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    taps = [
        x.data[:, :, i:i + h_span:stride, j:j + w_span:stride]
        for i in range(window)
        for j in range(window)
    ]
    out = taps[0].copy()
    idx = np.zeros(out.shape, dtype=np.int8 if window * window < 128 else np.int32)
    for q in range(1, len(taps)):
        better = taps[q] > out
        np.copyto(out, taps[q], where=better)
        idx[better] = q

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        for q in range(window * window):
            i, j = divmod(q, window)
            gx[:, :, i:i + h_span:stride, j:j + w_span:stride] += np.where(idx == q, g, 0)
        return (gx,)

    return from_op(out, (x,), backward, "maxpool2d")


def _axis_slice(ndim: int, axis: int, s: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centers, edges clamped: output 2i reads inputs i and i-1,
    # output 2i+1 reads inputs i and i+1
    n = a.shape[axis]
    shape = list(a.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, dtype=a.dtype)
    sl = lambda s: _axis_slice(a.ndim, axis, s)
    base = 0.75 * a
    even = out[sl(slice(0, None, 2))]
    odd = out[sl(slice(1, None, 2))]
    even[...] = base
    odd[...] = base
    even[sl(slice(1, None))] += 0.25 * a[sl(slice(0, n - 1))]
    even[sl(slice(0, 1))] += 0.25 * a[sl(slice(0, 1))]
    odd[sl(slice(0, n - 1))] += 0.25 * a[sl(slice(1, None))]
    odd[sl(slice(n - 1, n))] += 0.25 * a[sl(slice(n - 1, n))]
    return out


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    sl = lambda s: _axis_slice(g.ndim, axis, s)
    ge = g[sl(slice(0, None, 2))]
    go = g[sl(slice(1, None, 2))]
    size = ge.shape[axis]
    out = 0.75 * (ge + go)
    out[sl(slice(0, size - 1))] += 0.25 * ge[sl(slice(1, None))]
    out[sl(slice(0, 1))] += 0.25 * ge[sl(slice(0, 1))]
    out[sl(slice(1, None))] += 0.25 * go[sl(slice(0, size - 1))]
    out[sl(slice(size - 1, size))] += 0.25 * go[sl(slice(size - 1, size))]
    return out


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling, ``(N,C,H,W) -> (N,C,2H,2W)``."""
    _check_4d(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"cannot upsample empty tensor {x.shape}")
    out = _upsample_axis(_upsample_axis(x.data, 2), 3)

    def backward(g: np.ndarray):
        return (_upsample_axis_adjoint(_upsample_axis_adjoint(g, 3), 2),)

    return from_op(out, (x,), backward, "upsample_bilinear2x")


def broadcast_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Resize a ``(N,C,1,1)`` map to ``(N,C,height,width)``.

    Bilinear resampling of a single pixel with clamped edges is a constant fill.
    """
    _check_4d(x)
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_spatial expects a 1x1 map, got {x.shape}")
    out = np.broadcast_to(x.data, (x.shape[0], x.shape[1], height, width)).copy()

    def backward(g: np.ndarray):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return from_op(out, (x,), backward, "broadcast_spatial")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``(N,C,H,W) -> (N,C,1,1)``."""
    _check_4d(x)
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / hw, x.shape).astype(DTYPE),)

    return from_op(out, (x,), backward, "global_avg_pool")


# --------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningStats,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Batch normalization over ``(N, H, W)`` per channel.

    In training mode the batch statistics are used and ``state`` is updated as
    ``running = momentum * running + (1 - momentum) * batch`` (biased batch
    variance). In inference mode the stored statistics are used.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}", axis="C")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        mean = np.einsum("nchw->c", x.data) / DTYPE(m)
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = np.einsum("nchw,nchw->c", centered, centered) / DTYPE(m)
        if state.initialized:
            state.mean = (momentum * state.mean + (1 - momentum) * mean).astype(DTYPE)
            state.var = (momentum * state.var + (1 - momentum) * var).astype(DTYPE)
        else:
            state.mean, state.var = mean.astype(DTYPE), var.astype(DTYPE)
        invstd = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE).reshape(1, c, 1, 1)
        xhat = centered * invstd
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def backward(g: np.ndarray):
            sum_g = np.einsum("nchw->c", g)
            sum_gx = np.einsum("nchw,nchw->c", g, xhat)
            gx = None
            if x.requires_grad:
                # dxhat = g * gamma; its channel sums follow from sum_g and sum_gx
                scale = (g4 * invstd) / DTYPE(m)
                gx = scale * (DTYPE(m) * g - sum_g.reshape(1, c, 1, 1) - xhat * sum_gx.reshape(1, c, 1, 1))
            return gx, sum_gx if gamma.requires_grad else None, sum_g if beta.requires_grad else None

    else:
        if not state.initialized:
            raise RuntimeError("batchnorm2d in inference mode needs initialized running statistics")
        invstd = (1.0 / np.sqrt(state.var.astype(np.float64) + eps)).astype(DTYPE).reshape(1, c, 1, 1)
        xhat = (x.data - state.mean.reshape(1, c, 1, 1)) * invstd
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def backward(g: np.ndarray):
            gg = np.einsum("nchw,nchw->c", g, xhat) if gamma.requires_grad else None
            gb = np.einsum("nchw->c", g) if beta.requires_grad else None
            gx = g * (g4 * invstd) if x.requires_grad else None
            return gx, gg, gb

    return from_op(out, (x, gamma, beta), backward, "batchnorm2d")


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray):
        return (g * (x.data > 0),)

    return from_op(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so the result stays strictly inside (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)
    np.clip(s, _SIGMOID_EPS, 1.0 - _SIGMOID_EPS, out=s)

    def backward(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return from_op(s, (x,), backward, "sigmoid")


def _broadcast_kind(a_shape, b_shape) -> None:
    if a_shape == b_shape:
        return
    if len(a_shape) == 4 and len(b_shape) == 4 and a_shape[0] == b_shape[0]:
        n, c, h, w = a_shape
        if b_shape == (n, 1, h, w) or b_shape == (n, c, 1, 1):
            return
    for axis, (p, q) in enumerate(zip(a_shape, b_shape)):
        if p != q:
            raise ShapeError(f"cannot combine shapes {a_shape} and {b_shape}", axis=_AXES[axis] if len(a_shape) == 4 else None)
    raise ShapeError(f"cannot combine shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (p, q) in enumerate(zip(g.shape, shape)) if q == 1 and p != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may be a broadcast map (see module docstring)."""
    _broadcast_kind(a.shape, b.shape)
    out = a.data + b.data

    def backward(g: np.ndarray):
        return g, _reduce_to(g, b.shape)

    return from_op(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """``a * b``; ``b`` may be a broadcast map (see module docstring)."""
    _broadcast_kind(a.shape, b.shape)
    out = a.data * b.data

    def backward(g: np.ndarray):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(out, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * DTYPE(factor)

    def backward(g: np.ndarray):
        return (g * DTYPE(factor),)

    return from_op(out, (x,), backward, "scale")


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add`` or ``mul``."""
    if kind in ("relu", "sigmoid"):
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return relu(a) if kind == "relu" else sigmoid(a)
    if kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return add(a, b) if kind == "add" else mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# structural


def concat_channels(*xs: Tensor) -> Tensor:
    """Concatenate along the channel axis; the first operand leads."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    for t in xs:
        _check_4d(t)
    ref = xs[0].shape
    for t in xs[1:]:
        for axis in (0, 2, 3):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(f"cannot concatenate {ref} with {t.shape}", axis=_AXES[axis])
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return from_op(out, xs, backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(x)
    out = x.data[:, start:stop].copy()

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return from_op(out, (x,), backward, "slice_channels")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element as a 0-D tensor."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE)

    def backward(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return from_op(out, (x,), backward, "sum_all")
