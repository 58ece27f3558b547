"""The layer set used to express the denoiser.

Layers are small descriptors; parameters live outside them in a
:class:`ParamVector` so that the same architecture can be evaluated at the
full-precision point, a quantized point or a one-step-ahead point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError
from . import ops
from .tape import value


@dataclass(frozen=True)
class Dense:
    id: str
    n_in: int
    n_out: int
    bias: bool = True

    kind = "dense"

    def param_shapes(self):
        shapes = {f"{self.id}.w": (self.n_in, self.n_out)}
        if self.bias:
            shapes[f"{self.id}.b"] = (self.n_out,)
        return shapes

    def init(self, rng):
        # LeCun-normal weights, zero bias
        w = rng.standard_normal((self.n_in, self.n_out)) / math.sqrt(self.n_in)
        out = {f"{self.id}.w": w}
        if self.bias:
            out[f"{self.id}.b"] = np.zeros(self.n_out)
        return out

    def __call__(self, params, x, weight_fn=None):
        if np.shape(value(x))[-1] != self.n_in:
            raise ShapeMismatchError(self.id, (self.n_in,), np.shape(value(x))[-1:])
        w = params[f"{self.id}.w"]
        if weight_fn is not None:
            w = weight_fn(self.id, w)
        b = params.get(f"{self.id}.b") if self.bias else None
        return ops.linear(x, w, b)


@dataclass(frozen=True)
class Activation:
    fn: str  # "silu" or "relu"

    @property
    def kind(self):
        return self.fn

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def __call__(self, params, x, weight_fn=None):
        return ops.silu(x) if self.fn == "silu" else ops.relu(x)


@dataclass(frozen=True)
class LayerNorm:
    id: str
    dim: int
    eps: float = 1e-5

    kind = "layernorm"

    def param_shapes(self):
        return {f"{self.id}.gain": (self.dim,), f"{self.id}.shift": (self.dim,)}

    def init(self, rng):
        return {f"{self.id}.gain": np.ones(self.dim), f"{self.id}.shift": np.zeros(self.dim)}

    def __call__(self, params, x, weight_fn=None):
        if np.shape(value(x))[-1] != self.dim:
            raise ShapeMismatchError(self.id, (self.dim,), np.shape(value(x))[-1:])
        mu = ops.mean(x, axis=-1)
        centered = ops.sub(x, ops.reshape(mu, np.shape(value(mu)) + (1,)))
        var = ops.mean(ops.square(centered), axis=-1)
        inv = ops.rsqrt(ops.add(var, self.eps))
        normed = ops.mul(centered, ops.reshape(inv, np.shape(value(inv)) + (1,)))
        return ops.add(ops.mul(normed, params[f"{self.id}.gain"]), params[f"{self.id}.shift"])


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style timestep embedding, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def layer_from_dict(d: dict):
    kind = d["kind"]
    if kind == "dense":
        return Dense(d["id"], int(d["n_in"]), int(d["n_out"]), bool(d.get("bias", True)))
    if kind in ("silu", "relu"):
        return Activation(kind)
    if kind == "layernorm":
        return LayerNorm(d["id"], int(d["dim"]), float(d.get("eps", 1e-5)))
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_to_dict(layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "id": layer.id, "n_in": layer.n_in, "n_out": layer.n_out,
                "bias": layer.bias}
    if isinstance(layer, Activation):
        return {"kind": layer.fn}
    if isinstance(layer, LayerNorm):
        return {"kind": "layernorm", "id": layer.id, "dim": layer.dim, "eps": layer.eps}
    raise TypeError(type(layer))
