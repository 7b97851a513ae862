"""Differentiable primitives over :class:`Tensor`.

Every op returns a new tensor; backward closures return one gradient per
parent. Binary elementwise ops follow numpy broadcasting and reduce the
gradient back to each operand's shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DomainError, ShapeError, Tensor


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div", "division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._make(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                        lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log. With ``floor`` the input is clamped from below first
    (zero gradient where clamped); without it non-positive input raises."""
    d = x.data
    if floor is None:
        if np.any(d <= 0):
            raise DomainError("log", "non-positive input")
        return Tensor._make(np.log(d), (x,), lambda g: (g / d,), "log")
    fl = d.dtype.type(floor)
    keep = d > fl
    safe = np.where(keep, d, fl)
    return Tensor._make(np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0).astype(d.dtype),), "log")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose", x.shape, detail="need at least 2 dims")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in xs]) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, xs, bw, "concat")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    src = x.data

    def bw(g):
        gx = np.zeros_like(src)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw, "index")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")
    src = table.data

    def bw(g):
        gt = np.zeros_like(src)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, src.shape[1]))
        return (gt,)

    return Tensor._make(src[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1, temperature=None) -> Tensor:
    """Softmax along ``axis`` of ``x / temperature`` (max-subtracted)."""
    if temperature is not None:
        if isinstance(temperature, Tensor):
            if np.any(temperature.data <= 0):
                raise DomainError("softmax", "temperature must be positive")
            x = div(x, temperature)
        else:
            if temperature <= 0:
                raise DomainError("softmax", "temperature must be positive")
            x = scale(x, 1.0 / temperature)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm rows; all-zero rows stay zero."""
    d = x.data
    n = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    nz = n > 0
    safe = np.where(nz, n, 1)
    y = np.where(nz, d / safe, 0).astype(d.dtype)

    def bw(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(nz, gx, 0).astype(d.dtype),)

    return Tensor._make(y, (x,), bw, "l2_normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + d.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), bw, "layer_norm")


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine between rows of ``a`` (N, d) and rows of ``b`` (M, d)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_matrix", a.shape, b.shape)
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, target, axis: int = -1) -> Tensor:
    """Mean softmax cross-entropy over rows.

    ``target`` is either integer class ids (one per row) or a probability
    array of the logits' shape. The gradient is ``(softmax - target) / rows``.
    """
    if logits.ndim != 2 or axis not in (-1, 1):
        raise ShapeError("cross_entropy", logits.shape, detail="expected (rows, classes)")
    d = logits.data
    target = np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != d.shape[0] or target.dtype.kind not in "iu":
            raise ShapeError("cross_entropy", logits.shape, target.shape)
        t = np.zeros_like(d)
        t[np.arange(d.shape[0]), target] = 1
    else:
        if target.shape != d.shape:
            raise ShapeError("cross_entropy", logits.shape, target.shape)
        t = target.astype(d.dtype)
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = d.shape[0]
    loss = -(t * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) - t) / n,)

    return Tensor._make(np.asarray(loss, dtype=d.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- convolution helpers

def unfold(x: Tensor, k: int) -> Tensor:
    """Same-padded k×k patch extraction: (B, H, W, C) -> (B, H, W, k*k*C)."""
    if x.ndim != 4 or k % 2 != 1:
        raise ShapeError("unfold", x.shape, detail=f"need (B,H,W,C) and odd kernel, got k={k}")
    b, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, h, w, k * k, c), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di * k + dj, :] = xp[:, di:di + h, dj:dj + w, :]

    def bw(g):
        g = g.reshape(b, h, w, k * k, c)
        gp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                gp[:, di:di + h, dj:dj + w, :] += g[:, :, :, di * k + dj, :]
        return (gp[:, p:p + h, p:p + w, :],)

    return Tensor._make(cols.reshape(b, h, w, k * k * c), (x,), bw, "unfold")


def avg_pool2(x: Tensor) -> Tensor:
    """2×2 average pooling on (B, H, W, C) with even H, W."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", x.shape, detail="spatial extents must be even")
    return mean(reshape(x, (b, h // 2, 2, w // 2, 2, c)), axis=(2, 4))
