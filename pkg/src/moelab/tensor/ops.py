"""Differentiable primitives over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that maps
the upstream gradient to one gradient per input. Broadcasting is supported only
in ``add``/``sub``/``mul`` (bias rows, per-row scales); everything else expects
exact shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import _accel
from .core import Tensor, as_tensor, make_node

def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (no batch broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    if bd.ndim not in (2, ad.ndim):
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_node(ad @ bd, (a, b), bw, "matmul")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return make_node(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return make_node(np.transpose(x.data, axes), (x,), bw, "transpose")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return make_node(y, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (g / xd,)

    return make_node(np.log(xd), (x,), bw, "log")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    y, t = _accel.gelu_fwd(xd)

    def bw(g):
        return (_accel.gelu_bwd(xd, t, g),)

    return make_node(y, (x,), bw, "gelu")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    Masking is equivalent to replacing those logits by -inf before the softmax
    and renormalizing over the rest. Every slice must keep at least one entry.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax mask removes every entry of some slice")
        shifted = np.where(mask, xd, -np.inf)
    else:
        shifted = xd
    m = np.max(shifted, axis=axis, keepdims=True)
    e = np.exp(shifted - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target != ignore_index.

    ``logits`` is (N, V); ``targets`` is (N,) integer class ids.
    """
    ld = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if ld.ndim != 2 or targets.shape != (ld.shape[0],):
        raise ValueError(f"cross_entropy shape mismatch: logits {ld.shape}, targets {targets.shape}")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no target positions")
    rows = np.nonzero(valid)[0]
    cols = targets[rows]
    if (cols < 0).any() or (cols >= ld.shape[1]).any():
        raise ValueError("cross_entropy: target id out of range")
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[rows, cols].sum() / n_valid

    def bw(g):
        p = np.exp(logp)
        p[~valid] = 0.0
        p[rows, cols] -= 1.0
        return (p * (g / n_valid),)

    return make_node(np.asarray(loss, dtype=ld.dtype), (logits,), bw, "cross_entropy")


def entropy(p: Tensor, axis: int = -1) -> Tensor:
    """-sum p ln p along ``axis`` with 0 ln 0 = 0."""
    pd = p.data
    pos = pd > 0
    logp = np.where(pos, np.log(np.where(pos, pd, 1.0)), 0.0)
    h = -(pd * logp).sum(axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        return (np.where(pos, -(logp + 1.0), 0.0) * g,)

    return make_node(h, (p,), bw, "entropy")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    y = xhat * gd + bias.data
    rank = xd.ndim

    def bw(g):
        red = tuple(range(rank - 1))
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return make_node(y, (x, gain, bias), bw, "layer_norm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` (V, D) for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"embedding index out of range [0, {n_rows})")
    wd = weight.data

    def bw(g):
        out = np.zeros_like(wd)
        _accel.index_add_rows(out, ids.ravel(), g.reshape(-1, wd.shape[1]))
        return (out,)

    return make_node(wd[ids], (weight,), bw, "embedding")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """x[rows] for a 2-D tensor; rows may repeat."""
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        _accel.index_add_rows(out, rows, g)
        return (out,)

    return make_node(x.data[rows], (x,), bw, "take_rows")


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """np.take_along_axis(x, idx, axis=-1) for 2-D x."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    r = np.arange(shape[0])[:, None]

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (np.broadcast_to(r, idx.shape), idx), g)
        return (out,)

    return make_node(x.data[r, idx], (x,), bw, "take_along_last")


def scatter_rows_sum(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """out[rows[i]] += parts[i] for each i; rows within a single part are distinct."""
    if len(parts) != len(rows):
        raise ValueError("scatter_rows_sum: parts and rows length differ")
    if not parts:
        raise ValueError("scatter_rows_sum: nothing to scatter")
    width = parts[0].shape[1]
    out = np.zeros((n_rows, width), dtype=parts[0].dtype)
    for part, r in zip(parts, rows):
        out[r] += part.data

    def bw(g):
        return tuple(g[r] for r in rows)

    return make_node(out, tuple(parts), bw, "scatter_rows_sum")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")
