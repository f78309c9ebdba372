"""Differentiable primitives.

Broadcasting is deliberately narrow: the only implicit expansion is adding
a tensor whose shape equals the trailing dimensions of the other operand
(bias vectors, the positional table) and multiplying a stack of matrices
by a single weight matrix.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def raw_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product on plain arrays, honouring the global precision mode.

    In 64-bit mode the inner dimension is accumulated strictly left to right
    with separate multiply and add roundings, so results equal a naive
    triple loop bit for bit on every platform. BLAS (fused multiply-add,
    blocked summation) is used only in 32-bit mode.
    """
    if a.dtype != np.float64:
        return np.matmul(a, b)
    k = a.shape[-1]
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for p in range(1, k):
        out += a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for matrices, stacks of matrices, or a stack times one matrix."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = raw_matmul(ad, bd)

    def backward(g):
        ga = raw_matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = raw_matmul(ad.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = raw_matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add needs equal shapes or a trailing-dimension operand, got {a.shape} + {b.shape}")
    bshape = b.shape

    def backward(g):
        return g, _reduce_to(g, bshape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} - {b.shape}")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return make_result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    n = a.shape[axis]
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return make_result(a.data.mean(axis=axis), (a,), backward, "mean")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis using the max-shift for stability."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit population variance."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout. The mask comes only from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) * (1.0 / (1.0 - rate))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
