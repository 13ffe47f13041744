"""Differentiable primitives.

Every function takes tensors (or plain numbers/arrays where noted) and returns a
new tensor whose backward closure maps the upstream gradient to one gradient
per parent, in parent order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = float(exponent)

    def backward(g):
        return (g * e * ad ** (e - 1),)

    return Tensor._from_op(ad**e, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", ad.shape, bd.shape, detail="batch dims") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # shared weight: fold every leading axis into the row count
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(shape[ax] for ax in axes)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    out = a.data.mean(axis=axis, keepdims=keepdims)
    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(x * cdf, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learnable scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    if scale.shape != (n,) or shift.shape != (n,):
        raise ShapeError("layer_norm", xd.shape, scale.shape, shift.shape)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gs = (g * xhat).sum(axis=lead) if scale.requires_grad else None
        gb = g.sum(axis=lead) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * scale.data
            gx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gs, gb

    return Tensor._from_op(out, (x, scale, shift), backward)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |logit|.

    ``max(x, 0) - x*t + log(1 + exp(-|x|))``
    """
    x = logits.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError("bce_with_logits", x.shape, t.shape)
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * (special.expit(x) - t),)

    return Tensor._from_op(out, (logits,), backward)
