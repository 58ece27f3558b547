"""One-step-ahead model, closed-form meta-gradient, matching losses and the
accumulated sample-weight optimizer.

The meta-gradient needs no second-order autodiff: with
theta* = theta - eta * sum_i w_i g_i and g_i evaluated at theta,

    dL_val(theta*) / dw_i = -eta * <grad L_val(theta*), g_i>,

which is then pulled back through the softmax to the scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction

import numpy as np

from .. import grad_core as gc
from ..errors import (ConfigError, EmptyBatchError, MetaOptimizationError, NonFiniteError,
                      ShapeMismatchError)
from ..grad_core.params import two_product
from ..optim import Adam
from .weights import SampleWeights, softmax_pullback, softmax_weights


@dataclass
class MetaConfig:
    inner_lr: float = 1.0          # eta in theta* = theta - eta * sum w_i g_i
    outer_lr: float = 4e-5         # eta_omega, scale applied to the averaged drift
    t_acc: int = 5                 # pseudo-updates between committed updates
    meta_iters: int = 1500         # I
    batch: int = 64                # inner-batch size B
    pseudo_lr: float | None = None  # step of each pseudo-update; None -> inner_lr
    mode: str = "sgd"              # "sgd" or "adam" for the committed update
    restrict_batch: bool = True    # draw the inner batch from the sampled group only
    val_batch: int | None = None   # None: all validation samples of the group
    max_step: float | None = None  # clip each committed score change to [-max_step, max_step]

    def __post_init__(self):
        if not self.inner_lr > 0:
            raise ConfigError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.outer_lr < 0:
            raise ConfigError(f"outer_lr must be non-negative, got {self.outer_lr}")
        if self.t_acc < 1:
            raise ConfigError(f"t_acc must be >= 1, got {self.t_acc}")
        if self.meta_iters < 0 or self.batch < 1:
            raise ConfigError("meta_iters must be >= 0 and batch >= 1")
        if self.mode not in ("sgd", "adam"):
            raise ConfigError(f"unknown outer mode {self.mode!r}")
        if self.max_step is not None and not self.max_step > 0:
            raise ConfigError(f"max_step must be positive, got {self.max_step}")

    @property
    def step(self) -> float:
        return self.inner_lr if self.pseudo_lr is None else self.pseudo_lr

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def one_step_ahead(objective, theta: gc.ParamVector, ids, omega, eta: float):
    """theta* = theta - eta * sum_i w_i g_i over the batch ``ids``.

    ``omega`` is renormalized over the batch. Returns ``(theta_star, G)`` with
    ``G`` the (B, P) per-sample gradient matrix at ``theta``.
    """
    ids = np.asarray(ids)
    if ids.size == 0:
        raise EmptyBatchError("one-step-ahead model needs a non-empty batch")
    w = np.asarray(omega, dtype=np.float64)
    if w.shape != ids.shape:
        raise ShapeMismatchError("batch.weights", ids.shape, w.shape)
    w = w / w.sum()
    G = objective.per_sample_gradients(theta, ids)
    return step_from_gradients(theta, G, w, eta), G


def step_from_gradients(theta: gc.ParamVector, G: np.ndarray, w, eta: float) -> gc.ParamVector:
    return gc.ParamVector(theta.layout, theta.data - eta * (np.asarray(w) @ G))


def meta_gradient_from(val_grad, G: np.ndarray, eta: float, omega, tau: float):
    """Return (dL/dw, dL/ds) for the batch given the validation gradient at theta*."""
    G = np.asarray(G)
    omega = np.asarray(omega)
    if G.shape[0] != omega.shape[0]:
        raise ShapeMismatchError("meta_gradient", (omega.shape[0],), G.shape[:1])
    v = val_grad.data if isinstance(val_grad, gc.ParamVector) else np.asarray(val_grad)
    d_omega = -eta * (G @ v)
    return d_omega, softmax_pullback(omega, d_omega, tau)


def meta_gradient(objective, theta_star: gc.ParamVector, val_ids, G: np.ndarray, eta: float,
                  s_batch, tau: float):
    """dL_MSE(theta*, val) / ds over the batch scores ``s_batch``.

    ``G`` must be the per-sample gradients used to build ``theta_star``.
    Returns ``(grad_s, val_loss)``.
    """
    s_batch = np.asarray(s_batch, dtype=np.float64)
    if len(s_batch) != len(G):
        raise ShapeMismatchError("meta_gradient", (len(G),), s_batch.shape)
    val_loss, v = objective.loss_and_grad(theta_star, np.asarray(val_ids))
    omega = softmax_weights(s_batch, tau)
    _, grad_s = meta_gradient_from(v, G, eta, omega, tau)
    return grad_s, val_loss


def _exact_sum(values) -> Fraction:
    """Exact rational sum of doubles: every double is an integer over a power of two."""
    ratios = [v.as_integer_ratio() for v in values if v]
    if not ratios:
        return Fraction(0)
    shift = max(d.bit_length() for _, d in ratios) - 1
    total = sum(n << (shift - (d.bit_length() - 1)) for n, d in ratios)
    return Fraction(total, 1 << shift)


def _exact_pair_sum(vecs, ordered: bool) -> Fraction:
    terms = []
    n = len(vecs)
    for i in range(n):
        for j in range(n):
            if i == j or (not ordered and j < i):
                continue
            terms.extend(two_product(vecs[i], vecs[j]))
    return _exact_sum(np.concatenate(terms).tolist()) if terms else Fraction(0)


def gm_loss(grads, ordered: bool = False) -> float:
    """Negative mean pairwise inner product between group gradients.

    The default sums unordered pairs, so identical unit gradients give -1.
    ``ordered=True`` follows the literal sum over t != k with the same
    2 / (G (G - 1)) prefactor, doubling the value. The result is the exact
    value rounded once, so it does not depend on group order.
    """
    vecs = [g.data if isinstance(g, gc.ParamVector) else np.asarray(g, dtype=np.float64).ravel()
            for g in grads]
    G = len(vecs)
    if G < 2:
        raise ConfigError("gradient matching needs at least two groups")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ShapeMismatchError("gm_loss", vecs[0].shape, [v.shape for v in vecs])
    total = _exact_pair_sum(vecs, ordered)
    return float(Fraction(-2, G * (G - 1)) * total)


# ---------------------------------------------------------------------------
# accumulated optimizer over sample weights
# ---------------------------------------------------------------------------

@dataclass
class GroupIndex:
    """Objective-level sample indices per group, plus the position of every
    training sample inside the weight vector."""
    train: list            # per group: objective indices of training samples
    val: list              # per group: objective indices of validation samples
    train_all: np.ndarray  # objective index of weight entry j
    pos: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_all = np.asarray(self.train_all)
        self.pos = {int(i): j for j, i in enumerate(self.train_all)}

    @property
    def G(self) -> int:
        return len(self.val)

    def weight_positions(self, ids) -> np.ndarray:
        return np.array([self.pos[int(i)] for i in ids], dtype=np.int64)

    @classmethod
    def from_calibration(cls, cs) -> "GroupIndex":
        train = [cs.indices("train", g) for g in range(cs.G)]
        val = [cs.indices("val", g) for g in range(cs.G)]
        return cls(train, val, cs.indices("train"))


def group_schedule(G: int, n: int, rng) -> list:
    """Group visited at each iteration: concatenated random permutations."""
    seq = []
    while len(seq) < n:
        seq.extend(int(g) for g in rng.permutation(G))
    return seq[:n]


def algorithm1_optimize(objective, theta: gc.ParamVector, groups: GroupIndex,
                        weights: SampleWeights, cfg: MetaConfig, rng=None,
                        log=None) -> SampleWeights:
    """Accumulated pseudo-updates on a working copy of the scores, committed
    every ``t_acc`` iterations as s <- s0 + outer_lr * (s_work - s0) / t_acc
    (or an Adam step along that averaged drift)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out = weights.copy()
    if len(out) != len(groups.train_all):
        raise ShapeMismatchError("weights", (len(groups.train_all),), (len(out),))
    if cfg.meta_iters == 0 or cfg.outer_lr == 0:
        return out
    tau = out.tau
    adam = Adam(cfg.outer_lr) if cfg.mode == "adam" else None
    s0 = out.s.copy()
    work = s0.copy()
    seq = group_schedule(groups.G, cfg.meta_iters, rng)
    losses = []
    for it, g in enumerate(seq):
        pool = groups.train[g] if cfg.restrict_batch else groups.train_all
        if len(pool) == 0:
            raise EmptyBatchError(f"group {g} has no training samples")
        ids = np.sort(rng.choice(pool, size=min(cfg.batch, len(pool)), replace=False))
        pos = groups.weight_positions(ids)
        val_ids = groups.val[g]
        if cfg.val_batch is not None and cfg.val_batch < len(val_ids):
            val_ids = np.sort(rng.choice(val_ids, size=cfg.val_batch, replace=False))
        omega_b = softmax_weights(work[pos], tau)
        try:
            theta_star, G = one_step_ahead(objective, theta, ids, omega_b, cfg.inner_lr)
            grad_s, val_loss = meta_gradient(objective, theta_star, val_ids, G, cfg.inner_lr,
                                             work[pos], tau)
        except NonFiniteError:
            raise MetaOptimizationError(it, float("nan")) from None
        if not (math.isfinite(val_loss) and np.all(np.isfinite(grad_s))):
            raise MetaOptimizationError(it, val_loss)
        losses.append(val_loss)
        work[pos] -= cfg.step * grad_s
        if (it + 1) % cfg.t_acc == 0 or it + 1 == len(seq):
            n_acc = (it % cfg.t_acc) + 1
            drift = (work - s0) / n_acc
            if adam is None:
                s_new = s0 + cfg.outer_lr * drift
            else:
                s_new = adam.step(s0, -drift)
            if cfg.max_step is not None:
                s_new = s0 + np.clip(s_new - s0, -cfg.max_step, cfg.max_step)
            if not np.all(np.isfinite(s_new)):
                raise MetaOptimizationError(it, val_loss)
            s0 = s_new
            work = s0.copy()
            out.history.append({"iteration": out.iteration + it + 1,
                                "val_loss": float(np.mean(losses[-n_acc:]))})
            if log is not None:
                log(it, losses[-1])
    out.s = s0
    out.iteration += len(seq)
    return out
