"""Differentiable operations.

Only the operations the models need are provided. Broadcasting is limited to
the bias-add pattern: the second operand of :func:`add`/:func:`mul` may be
broadcast to the shape of the first, never the other way round.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_bias(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim:
        raise ShapeError(op, a.shape, b.shape, detail="only the second operand may broadcast")
    for sa, sb in zip(a.shape[a.ndim - b.ndim:], b.shape):
        if sb != sa and sb != 1:
            raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (g, _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _check_bias("sub", a, b)
    sb = b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (g, -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_bias("mul", a, b)
    ad, bd, sb = a.data, b.data, b.shape

    def backward(g):
        return (g * bd if a.requires_grad else None,
                _unbroadcast(g * ad, sb) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim not in (2, 3) or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if bd.ndim == 3 and (ad.ndim != 3 or ad.shape[0] != bd.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape, detail="batched matmul needs equal batch")
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = [t.shape for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for s in shapes:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *shapes)
    sizes = np.cumsum([s[ax] for s in shapes])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=ax)

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                       backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = [t.shape for t in tensors]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError("stack", *shapes)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return make_result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                       backward, "stack")


def slice(x: Tensor, index) -> Tensor:
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError("slice", x.shape, detail=str(exc)) from None
    shape, dtype = x.shape, x.dtype

    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward, "slice")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, type(Ellipsis), type(None)))
               or type(i).__name__ == "slice" for i in items)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if weight.ndim != 2 or ids.dtype.kind not in "iu":
        raise ShapeError("embedding", weight.shape, ids.shape, detail="need 2-D table and int ids")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape, detail="id out of range")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_result(weight.data[ids], (weight,), backward, "embedding")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form: stable for large |v| and much faster than exp-based variants
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _masked_logits(xd: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return xd
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != xd.shape:
        raise ShapeError("softmax", xd.shape, mask.shape, detail="mask must match input")
    return np.where(mask, xd, -np.inf)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions with ``mask == False`` get exactly zero."""
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), backward, "log_softmax")


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeError("pick", x.shape, index.shape)
    idx = index[..., None]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return make_result(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward, "pick")


def sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, mask=None) -> Tensor:
    """Mean over ``axis``; with ``mask`` (shape = leading dims of x up to and
    including ``axis``) only unmasked entries count."""
    if mask is None:
        n = x.data.size if axis is None else x.shape[axis]
        shape = x.shape

        def backward(g):
            if axis is None:
                return (np.full(shape, g / n, dtype=x.dtype),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

        return make_result(np.asarray(x.data.mean(axis=axis)), (x,), backward, "mean")
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:m.ndim]:
        raise ShapeError("mean", x.shape, m.shape, detail="mask must cover leading dims")
    mexp = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    if axis is None:
        denom = max(float(m.sum()), 1.0)
        out = (x.data * mexp).sum() / denom

        def backward(g):
            return (np.broadcast_to(mexp * (g / denom), x.shape).astype(x.dtype),)

        return make_result(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")
    denom = np.maximum(mexp.sum(axis=axis, keepdims=True), 1.0)
    out = (x.data * mexp).sum(axis=axis) / np.squeeze(denom, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * mexp / denom,)

    return make_result(out.astype(x.dtype), (x,), backward, "mean")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    if not training or p <= 0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- GRU ------------------------------------------------------------------
# Gate layout along the last axis of the 3H projections: [reset, update, new].

def _gru_forward(xw, h, wh, bh, m):
    H = h.shape[-1]
    hw = h @ wh + bh
    rz = _sigmoid(xw[:, :2 * H] + hw[:, :2 * H])
    r, z = rz[:, :H], rz[:, H:]
    hn = hw[:, 2 * H:]
    n = np.tanh(xw[:, 2 * H:] + r * hn)
    hnew = (1 - z) * n + z * h
    if m is not None:
        hnew = m * hnew + (1 - m) * h
    return hnew, (r, z, n, hn)


def _gru_backward(g, h, wh, m, cache):
    r, z, n, hn = cache
    if m is not None:
        gcarry = (1 - m) * g
        g = m * g
    else:
        gcarry = 0.0
    dn = g * (1 - z)
    dz = g * (h - n) * z * (1 - z)
    dnp = dn * (1 - n * n)
    dr = dnp * hn * r * (1 - r)
    dxw = np.concatenate([dr, dz, dnp], axis=-1)
    dhw = np.concatenate([dr, dz, dnp * r], axis=-1)
    dh = g * z + gcarry + dhw @ wh.T
    return dxw, dhw, dh


def _check_gru(op, xw, h, wh, bh):
    H = h.shape[-1]
    if wh.shape != (H, 3 * H) or bh.shape != (3 * H,) or xw.shape[-1] != 3 * H:
        raise ShapeError(op, xw.shape, h.shape, wh.shape, bh.shape)


def gru_cell(xw: Tensor, h: Tensor, wh: Tensor, bh: Tensor, mask=None) -> Tensor:
    """One GRU step given the input projection ``xw = x @ Wx + bx`` (B, 3H).

    ``mask`` (B,) keeps the previous state where it is zero.
    """
    _check_gru("gru_cell", xw, h, wh, bh)
    if xw.shape[0] != h.shape[0]:
        raise ShapeError("gru_cell", xw.shape, h.shape)
    m = None if mask is None else np.asarray(mask, dtype=h.dtype)[:, None]
    out, cache = _gru_forward(xw.data, h.data, wh.data, bh.data, m)
    hd, whd = h.data, wh.data

    def backward(g):
        dxw, dhw, dh = _gru_backward(g, hd, whd, m, cache)
        return dxw, dh, hd.T @ dhw, dhw.sum(axis=0)

    return make_result(out, (xw, h, wh, bh), backward, "gru_cell")


def gru_sequence(xw: Tensor, h0: Tensor, wh: Tensor, bh: Tensor, mask=None,
                 reverse: bool = False) -> Tensor:
    """Scan :func:`gru_cell` over time. ``xw`` is (B, S, 3H); returns (B, S, H)
    hidden states aligned with input positions (also when ``reverse``)."""
    _check_gru("gru_sequence", xw, h0, wh, bh)
    B, S, _ = xw.shape
    if h0.shape[0] != B:
        raise ShapeError("gru_sequence", xw.shape, h0.shape)
    M = None if mask is None else np.asarray(mask, dtype=h0.dtype)
    if M is not None and M.shape != (B, S):
        raise ShapeError("gru_sequence", xw.shape, M.shape, detail="mask must be (B, S)")
    steps = range(S - 1, -1, -1) if reverse else range(S)
    xd, whd, bhd = xw.data, wh.data, bh.data
    out = np.empty((B, S, h0.shape[1]), dtype=h0.dtype)
    prevs, caches = [None] * S, [None] * S
    h = h0.data
    for t in steps:
        m = None if M is None else M[:, t:t + 1]
        prevs[t] = h
        h, caches[t] = _gru_forward(xd[:, t], h, whd, bhd, m)
        out[:, t] = h

    def backward(g):
        dxw = np.empty_like(xd)
        dwh = np.zeros_like(whd)
        dbh = np.zeros_like(bhd)
        carry = np.zeros_like(h0.data)
        for t in reversed(list(steps)):
            m = None if M is None else M[:, t:t + 1]
            dx_t, dhw, carry = _gru_backward(g[:, t] + carry, prevs[t], whd, m, caches[t])
            dxw[:, t] = dx_t
            dwh += prevs[t].T @ dhw
            dbh += dhw.sum(axis=0)
        return dxw, carry, dwh, dbh

    return make_result(out, (xw, h0, wh, bh), backward, "gru_sequence")
