"""
Differentiable operators over :class:`~irformer.core.tensor.Tensor`.

Binary elementwise ops follow numpy broadcasting; the backward pass sums the
gradient back down to each operand's shape.  Convolution uses an im2col
layout (cross-correlation convention, like every DL framework).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from irformer.core.tensor import Tensor, as_tensor
from irformer.errors import DimensionError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcast to reach it from ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return Tensor._result(a.data * factor, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def backward(g):
        return (g * positive,)

    return Tensor._result(np.where(positive, a.data, 0.0), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes (reverse order when ``axes`` is None); always copies."""
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {a.ndim}-D tensor")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ndim = tensors[0].ndim
    axis = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat along {axis}: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra / normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dims incompatible: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return Tensor._result(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting each row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (population variance) then apply gain/bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """
    Per-sample normalisation of (B, C, H, W) over channel groups, then a
    per-channel affine.  Uses no batch statistics, so train and eval agree.
    """
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise DimensionError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"group_norm affine shapes {gain.shape}/{bias.shape} vs {C} channels")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    g_b = gain.data.reshape(1, C, 1, 1)
    out = xhat * g_b + bias.data.reshape(1, C, 1, 1)

    def backward(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        dxhat = (g * g_b).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
        return dx.reshape(x.shape), dgain, dbias

    return Tensor._result(out, (x, gain, bias), backward, "group_norm")


# ---------------------------------------------------------------------------
# spatial ops (NCHW)
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        Input of shape (B, Cin, H, W).
    w : Tensor
        Kernel of shape (Cout, Cin, kh, kw).
    bias : Tensor, optional
        Shape (Cout,).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes by ``factor``."""
    if x.ndim < 2:
        raise DimensionError("upsample_nearest needs at least 2-D input")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    *lead, h, w = x.shape

    def backward(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return Tensor._result(out, (x,), backward, "upsample")


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel) over the trailing two axes."""
    *lead, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"maxpool2d: {h}x{w} not divisible by {kernel}")
    blocks = x.data.reshape(*lead, h // kernel, kernel, w // kernel, kernel)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // kernel, w // kernel, kernel * kernel)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // kernel, w // kernel, kernel, kernel)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "maxpool2d")


def global_mean(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    return mean(x, axis=(-2, -1))
