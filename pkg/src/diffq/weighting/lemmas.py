"""Numerical checks of the two weighting lemmas on a concrete objective.

Both checks work with the full training set in the one-step-ahead model,
theta*(w) = theta - eta_in * J^T w with J the (N, P) per-sample gradient
matrix at theta, so every per-group weight gradient is available in closed
form: G_t(w) = -eta_in * J grad L_t(theta*(w)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from .. import grad_core as gc
from .meta import GroupIndex, gm_loss
from .weights import SampleWeights, softmax_pullback, softmax_weights


class _WeightGradients:
    """Per-group gradients of the validation loss w.r.t. the sample weights."""

    def __init__(self, objective, theta: gc.ParamVector, groups: GroupIndex, inner_lr: float,
                 tau: float = 1.0, space: str = "omega"):
        if space not in ("omega", "s"):
            raise ValueError(f"space must be 'omega' or 's', got {space!r}")
        self.objective = objective
        self.theta = theta
        self.groups = groups
        self.inner_lr = inner_lr
        self.tau = tau
        self.space = space
        self.J = objective.per_sample_gradients(theta, groups.train_all)

    def theta_star(self, omega) -> gc.ParamVector:
        return gc.ParamVector(self.theta.layout, self.theta.data - self.inner_lr * (omega @ self.J))

    def theta_grad(self, omega, t: int) -> np.ndarray:
        _, v = self.objective.loss_and_grad(self.theta_star(omega), self.groups.val[t])
        return v.data

    def omega_of(self, u):
        return softmax_weights(u, self.tau) if self.space == "s" else u

    def __call__(self, u, t: int) -> np.ndarray:
        """Gradient of group t's validation loss w.r.t. the coordinates ``u``
        (the weights themselves, or the scores in s-space)."""
        omega = self.omega_of(u)
        g = -self.inner_lr * (self.J @ self.theta_grad(omega, t))
        if self.space == "s":
            g = softmax_pullback(omega, g, self.tau)
        return g

    def hvp(self, u, t: int, direction, rel_step: float = 1e-4) -> np.ndarray:
        """Central finite difference of G_t along ``direction``."""
        norm = np.linalg.norm(direction)
        if norm == 0:
            return np.zeros_like(direction)
        h = rel_step * max(np.linalg.norm(u), 1.0) / norm
        return (self(u + h * direction, t) - self(u - h * direction, t)) / (2 * h)


def relative_inner_lr(objective, theta: gc.ParamVector, groups: GroupIndex, rel: float) -> float:
    """Inner learning rate whose uniform-weight step moves theta by ``rel * |theta|``."""
    _, g = objective.loss_and_grad(theta, groups.train_all)
    gn = g.norm()
    return rel * max(theta.norm(), 1.0) / gn if gn > 0 else 1.0


@dataclass
class Lemma43Report:
    eta: float
    inner_lr: float
    t_acc: int
    order: list
    space: str
    residual_composite: float
    residual_mse: float
    residual_composite_single_order: float
    drift_norm: float
    second_order_norm: float
    l2_gm: float
    composite_beats_mse: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _run_drift(wg: _WeightGradients, u0, order, eta):
    u = u0.copy()
    drift = np.zeros_like(u0)
    for t in order:
        step = -eta * wg(u, t)
        drift += step
        u = u0 + drift
    return drift


def l2_gm_gradient(wg: _WeightGradients, u0, order, grads=None) -> np.ndarray:
    """Gradient of the surrogate matching loss over the groups in ``order``,
    -(2 / (T (T - 1))) * sum_t H_t sum_{k != t} G_k, via Hessian-vector products."""
    T = len(order)
    if T < 2:
        return np.zeros_like(u0)
    grads = grads if grads is not None else {t: wg(u0, t) for t in order}
    total = sum(grads.values())
    acc = np.zeros_like(u0)
    for t in order:
        acc += wg.hvp(u0, t, total - grads[t])
    return -2.0 / (T * (T - 1)) * acc


def verify_lemma_43(objective, theta: gc.ParamVector, groups: GroupIndex, weights: SampleWeights,
                    eta: float = 1e-6, t_acc: int | None = None, inner_lr: float = 1.0,
                    seed: int = 0, space: str = "omega") -> Lemma43Report:
    """Compare the drift of ``t_acc`` sequential pseudo-updates with the
    first-order L_MSE prediction and the composite L_MSE + L2_GM prediction.

    The drift is averaged over one visiting order and its reverse, which is
    the order-averaged quantity the expansion describes; the residual of the
    single order is reported alongside.
    """
    rng = np.random.default_rng(seed)
    T = groups.G if t_acc is None else t_acc
    if not 1 <= T <= groups.G:
        raise ValueError(f"t_acc must lie in [1, {groups.G}], got {T}")
    order = [int(g) for g in rng.permutation(groups.G)[:T]]
    wg = _WeightGradients(objective, theta, groups, inner_lr, weights.tau, space)
    u0 = weights.s.copy() if space == "s" else weights.omega

    drift_fwd = _run_drift(wg, u0, order, eta)
    drift = drift_fwd if T == 1 else 0.5 * (drift_fwd + _run_drift(wg, u0, order[::-1], eta))

    grads = {t: wg(u0, t) for t in order}
    grad_mse = sum(grads[t] for t in order)
    pred_mse = -eta * grad_mse
    if T == 1:
        pred_comp, second, l2 = pred_mse, np.zeros_like(u0), 0.0
    else:
        g2 = l2_gm_gradient(wg, u0, order, grads)
        coef = eta * T * (T - 1) / 4.0
        pred_comp = -eta * (grad_mse + coef * g2)
        second = -eta * coef * g2
        l2 = gm_loss([grads[t] for t in order])
    dn = float(np.linalg.norm(drift))
    res = lambda d, p: float(np.linalg.norm(d - p) / dn) if dn > 0 else 0.0
    r_comp, r_mse = res(drift, pred_comp), res(drift, pred_mse)
    return Lemma43Report(eta, inner_lr, T, order, space, r_comp, r_mse,
                         res(drift_fwd, pred_comp), dn, float(np.linalg.norm(second)), l2,
                         bool(r_comp < r_mse))


@dataclass
class Lemma42Report:
    n_configs: int
    n_pairs: int
    correlation: float | None
    degenerate: bool
    reason: str = ""
    omega_cos: list = field(default_factory=list)
    theta_cos: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def verify_lemma_42(objective, theta: gc.ParamVector, groups: GroupIndex, weights: SampleWeights,
                    inner_lr: float = 1.0, n_configs: int = 50, spread: float = 1.0,
                    seed: int = 0) -> Lemma42Report:
    """Rank correlation between the weight-space cosines cos(G_w,i, G_w,j) and
    the parameter-space cosines cos(G_theta*,i, G_theta*,j), pooled over
    group pairs and ``n_configs`` random score perturbations."""
    if groups.G < 2:
        raise ValueError("the matching check needs at least two groups")
    rng = np.random.default_rng(seed)
    wg = _WeightGradients(objective, theta, groups, inner_lr, weights.tau, "omega")
    cw, ct = [], []
    for _ in range(n_configs):
        s = weights.s + spread * rng.standard_normal(len(weights))
        omega = softmax_weights(s, weights.tau)
        gth = [wg.theta_grad(omega, t) for t in range(groups.G)]
        gom = [-inner_lr * (wg.J @ g) for g in gth]
        for i in range(groups.G):
            for j in range(i + 1, groups.G):
                cw.append(_cos(gom[i], gom[j]))
                ct.append(_cos(gth[i], gth[j]))
    cw_a, ct_a = np.array(cw), np.array(ct)
    ok = np.isfinite(cw_a) & np.isfinite(ct_a)
    n_pairs = int(ok.sum())
    if n_pairs < 3:
        return Lemma42Report(n_configs, n_pairs, None, True, "fewer than three finite pairs", cw, ct)
    if np.ptp(cw_a[ok]) < 1e-12 or np.ptp(ct_a[ok]) < 1e-12:
        return Lemma42Report(n_configs, n_pairs, None, True, "constant cosine family", cw, ct)
    rho = float(stats.spearmanr(cw_a[ok], ct_a[ok]).statistic)
    return Lemma42Report(n_configs, n_pairs, rho, False, "", cw, ct)
