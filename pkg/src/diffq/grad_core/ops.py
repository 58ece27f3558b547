"""Differentiable primitives.

Every function accepts plain arrays or :class:`Var` objects. With no Var among
the inputs the plain numpy result is returned, so model code is written once
and runs both taped and untaped.
"""

from __future__ import annotations

import numpy as np

from .tape import Var, record, value


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    sa, sb = np.shape(va), np.shape(vb)
    return record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    sa, sb = np.shape(va), np.shape(vb)
    need_b = isinstance(b, Var)
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb) if need_b else None))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    sa, sb = np.shape(va), np.shape(vb)
    need_a, need_b = isinstance(a, Var), isinstance(b, Var)
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * vb, sa) if need_a else None,
                             _unbroadcast(g * va, sb) if need_b else None))


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    sa, sb = np.shape(va), np.shape(vb)
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / vb, sa), _unbroadcast(-g * out / vb, sb)))


def neg(a):
    return record(-value(a), (a,), lambda g: (-g,))


def square(a):
    va = value(a)
    return record(va * va, (a,), lambda g: (2.0 * g * va,))


def exp(a):
    out = np.exp(value(a))
    return record(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    va = value(a)
    sig = 1.0 / (1.0 + np.exp(-va))
    out = va * sig
    return record(out, (a,), lambda g: (g * (sig + va * sig * (1.0 - sig)),))


def relu(a):
    va = value(a)
    mask = va > 0
    return record(np.where(mask, va, 0.0), (a,), lambda g: (g * mask,))


def rsqrt(a):
    out = 1.0 / np.sqrt(value(a))
    return record(out, (a,), lambda g: (-0.5 * g * out ** 3,))


def abs_pow(a, p: float):
    """|a|**p for a constant exponent p >= 1."""
    va = value(a)
    mag = np.abs(va)
    out = mag ** p
    return record(out, (a,), lambda g: (g * p * mag ** (p - 1.0) * np.sign(va),))


def clip(a, lo, hi, slack: float = 0.0):
    """Clamp to [lo, hi]; gradient passes where the input lies within the
    bounds widened by ``slack``."""
    va = value(a)
    out = np.clip(va, lo, hi)
    mask = (va >= np.asarray(lo) - slack) & (va <= np.asarray(hi) + slack)
    return record(out, (a,), lambda g: (g * mask,))


def round_ste(a):
    """Round to nearest with a straight-through gradient."""
    return record(np.round(value(a)), (a,), lambda g: (g,))


def total(a, axis=None):
    va = value(a)
    out = va.sum(axis=axis)
    shape = va.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(out, (a,), vjp)


def mean(a, axis=None):
    va = value(a)
    n = va.size if axis is None else va.shape[axis]
    return mul(total(a, axis=axis), 1.0 / n)


def concat(parts, axis=-1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(out, tuple(parts), vjp)


def linear(x, w, b=None):
    """Affine map. ``w`` is (in, out) shared across the batch, or (B, in, out)
    for per-sample parameters; ``b`` likewise (out,) or (B, out)."""
    vx, vw = value(x), value(w)
    need_x, need_w = isinstance(x, Var), isinstance(w, Var)
    if vw.ndim == 2:
        out = vx @ vw

        def vjp_xw(g):
            return (g @ vw.T if need_x else None, vx.T @ g if need_w else None)
    else:
        out = np.einsum("bi,bio->bo", vx, vw)

        def vjp_xw(g):
            return (np.einsum("bo,bio->bi", g, vw) if need_x else None,
                    np.einsum("bi,bo->bio", vx, g) if need_w else None)

    y = record(out, (x, w), vjp_xw)
    if b is None:
        return y
    return add(y, b)


def reshape(a, shape):
    va = value(a)
    old = va.shape
    return record(va.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape):
    va = value(a)
    old = va.shape
    out = np.broadcast_to(va, shape)
    return record(out, (a,), lambda g: (_unbroadcast(g, old),))


def where(mask, a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    out = np.where(mask, va, vb)
    return record(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                                          _unbroadcast(np.where(mask, 0.0, g), sb)))


def is_taped(x) -> bool:
    return isinstance(x, Var)
