"""Per-sample quantization-loss objectives consumed by the weighting code.

Anything with ``per_sample_gradients(theta, ids)`` returning a (B, P) matrix,
``loss_and_grad(theta, ids)`` returning the mean loss over ``ids`` and its
gradient, and ``losses(theta, ids)`` works. The quantizer's block objectives
already satisfy this; :class:`DistillObjective` covers the case where the
quantized weights themselves are treated as continuous parameters.
"""

from __future__ import annotations

import numpy as np

from .. import grad_core as gc
from ..grad_core import ops


class DistillObjective:
    """L_i(theta) = ||f(theta, x_i, t_i) - f(theta_FP, x_i, t_i)||^2 over all
    parameters of a denoiser."""

    def __init__(self, model, x, t, target_params: gc.ParamVector | None = None):
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.t = np.asarray(t)
        ref = model.params if target_params is None else target_params
        self.emb = model.embed(self.x, self.t)
        self.target = np.asarray(model.run_layers(ref.arrays(), self.emb))
        self.layout = model.layout

    @property
    def n_samples(self) -> int:
        return len(self.x)

    def loss_fn(self):
        model = self.model

        def fn(theta, emb, target):
            out = model.run_layers(theta, emb)
            return ops.total(ops.square(ops.sub(out, target)), axis=-1)
        return fn

    def _select(self, ids):
        if ids is None:
            return self.emb, self.target
        ids = np.asarray(ids)
        return self.emb[ids], self.target[ids]

    def losses(self, theta: gc.ParamVector, ids=None) -> np.ndarray:
        e, y = self._select(ids)
        return np.asarray(self.loss_fn()(theta.arrays(), e, y))

    def loss_and_grad(self, theta: gc.ParamVector, ids=None, weights=None):
        e, y = self._select(ids)
        fn = self.loss_fn()
        n = len(e)

        def scalar(p, a, b):
            per = fn(p, a, b)
            if weights is None:
                return ops.mul(ops.total(per), 1.0 / n)
            return ops.total(ops.mul(per, weights))
        return gc.value_and_grad(scalar, theta, e, y)

    def per_sample_gradients(self, theta: gc.ParamVector, ids=None) -> np.ndarray:
        e, y = self._select(ids)
        return gc.per_sample_gradient_matrix(self.loss_fn(), theta, (e, y))


def tiny_instance(seed: int = 0, n: int = 48, hidden: int = 8, T_steps: int = 10,
                  emb_dim: int = 4, noise: float = 0.05, G: int = 3, val_every: int = 4):
    """A small random distillation problem (well under 10^3 parameters).

    Returns ``(objective, theta_q, groups)``: ``theta_q`` is the teacher's
    parameters perturbed by ``noise`` (a stand-in for quantization error) and
    ``groups`` splits the samples into G contiguous timestep groups with every
    ``val_every``-th sample of a group held out for validation.
    """
    from ..diffusion import DenoiserModel
    from .meta import GroupIndex
    rng = np.random.default_rng(seed)
    model = DenoiserModel.mlp(data_dim=2, hidden=hidden, depth=2, emb_dim=emb_dim,
                              T_steps=T_steps, seed=seed)
    x = rng.standard_normal((n, 2))
    t = np.sort(rng.integers(0, T_steps, size=n))
    obj = DistillObjective(model, x, t)
    theta_q = model.params + gc.ParamVector(model.layout,
                                            noise * rng.standard_normal(model.layout.size))
    train, val = [], []
    for part in np.array_split(np.arange(n), G):
        mask = np.arange(len(part)) % val_every == val_every - 1
        val.append(part[mask])
        train.append(part[~mask])
    return obj, theta_q, GroupIndex(train, val, np.concatenate(train))
