"""Toy DDPM: noise schedule, MLP denoiser, deterministic DDIM sampler, training."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import grad_core as gc
from .errors import ShapeMismatchError, TimestepError, TrainingDivergedError
from .grad_core import ops
from .grad_core.layers import Activation, Dense, LayerNorm, layer_from_dict, layer_to_dict
from .optim import Adam


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, T_steps: int, beta_start: float | None = None, beta_end: float | None = None):
        # defaults keep alpha_bar at the last step near 0.02 for T in {10, 20}
        beta_start = 0.2 / T_steps if beta_start is None else beta_start
        beta_end = 7.0 / T_steps if beta_end is None else beta_end
        return cls(np.linspace(beta_start, beta_end, T_steps))

    @property
    def T_steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at timestep t; t = -1 denotes the clean endpoint."""
        if t == -1:
            return 1.0
        self.check(t)
        return float(self.alpha_bars[t])

    def check(self, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr >= self.T_steps):
            raise TimestepError(f"timestep {t} outside [0, {self.T_steps})")

    def ladder(self, n_steps: int | None = None) -> list[int]:
        """DDIM timesteps from noisiest to cleanest."""
        n = self.T_steps if n_steps is None else n_steps
        ts = np.linspace(self.T_steps - 1, 0, n).round().astype(int)
        return [int(t) for t in ts]

    def digest(self) -> str:
        return hashlib.sha256(self.betas.astype("<f8").tobytes()).hexdigest()[:16]


def forward_noise(x0, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """Sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise (t scalar or per-row)."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeMismatchError("forward_noise", x0.shape, noise.shape)
    schedule.check(t)
    ab = schedule.alpha_bars[np.asarray(t)]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


@dataclass
class DenoiserModel:
    """epsilon-prediction MLP: concat(x, time-embedding) -> dense stack -> noise."""

    data_dim: int
    emb_dim: int
    T_steps: int
    layers: tuple
    params: gc.ParamVector

    @classmethod
    def mlp(cls, data_dim=2, hidden=64, depth=3, emb_dim=16, T_steps=20, activation="silu",
            layernorm=False, seed=0):
        layers = []
        n_in = data_dim + emb_dim
        for i in range(depth):
            last = i == depth - 1
            n_out = data_dim if last else hidden
            layers.append(Dense(f"dense{i}", n_in, n_out))
            if not last:
                if layernorm:
                    layers.append(LayerNorm(f"norm{i}", n_out))
                layers.append(Activation(activation))
            n_in = n_out
        return cls.from_layers(data_dim, emb_dim, T_steps, layers, seed)

    @classmethod
    def from_layers(cls, data_dim, emb_dim, T_steps, layers, seed=0):
        rng = np.random.default_rng(seed)
        arrays = {}
        for layer in layers:
            arrays.update(layer.init(rng))
        return cls(data_dim, emb_dim, T_steps, tuple(layers), gc.ParamVector.from_arrays(arrays))

    @property
    def layout(self) -> gc.ParamLayout:
        return self.params.layout

    def dense_layers(self) -> list[Dense]:
        return [l for l in self.layers if isinstance(l, Dense)]

    def layer_index(self, layer_id: str) -> int:
        for i, l in enumerate(self.layers):
            if getattr(l, "id", None) == layer_id:
                return i
        raise KeyError(layer_id)

    def embed(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ShapeMismatchError("input", (None, self.data_dim), x.shape)
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        emb = gc.sinusoidal_embedding(t * (1000.0 / self.T_steps), self.emb_dim)
        return np.concatenate([x, emb], axis=1)

    def run_layers(self, params, h, start=0, stop=None, weight_fn=None, input_fn=None):
        """Apply layers[start:stop] to activations ``h``.

        ``weight_fn(layer_id, w)`` substitutes effective weights (quantization);
        ``input_fn(layer_id, h)`` transforms the input of each dense layer.
        """
        stop = len(self.layers) if stop is None else stop
        for layer in self.layers[start:stop]:
            if input_fn is not None and isinstance(layer, Dense):
                h = input_fn(layer.id, h)
            h = layer(params, h, weight_fn)
        return h

    def forward(self, params, x, t, weight_fn=None, input_fn=None):
        return self.run_layers(params, self.embed(x, t), weight_fn=weight_fn, input_fn=input_fn)

    def __call__(self, x, t, params: gc.ParamVector | None = None):
        p = (self.params if params is None else params).arrays()
        return self.forward(p, x, t)

    def with_params(self, params: gc.ParamVector) -> "DenoiserModel":
        return DenoiserModel(self.data_dim, self.emb_dim, self.T_steps, self.layers, params)

    def architecture(self) -> dict:
        return {"data_dim": self.data_dim, "emb_dim": self.emb_dim, "T_steps": self.T_steps,
                "layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_architecture(cls, arch: dict, params: gc.ParamVector | None = None):
        layers = tuple(layer_from_dict(d) for d in arch["layers"])
        model = cls.from_layers(arch["data_dim"], arch["emb_dim"], arch["T_steps"], layers)
        if params is not None:
            if params.layout != model.layout:
                params = gc.ParamVector(model.layout, params.data)
            model.params = params
        return model

    def save(self, path):
        from pathlib import Path
        gc.save(self.params, path)
        Path(str(path) + ".json").write_text(json.dumps(self.architecture(), indent=1))

    @classmethod
    def load(cls, path):
        from pathlib import Path
        arch = json.loads(Path(str(path) + ".json").read_text())
        model = cls.from_architecture(arch)
        model.params = gc.load(path, like=model.layout)
        return model


def ddim_step(x_t, t: int, t_prev: int, model: DenoiserModel | Callable, schedule: NoiseSchedule,
              eps=None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from timestep t to t_prev (-1 = clean)."""
    if t_prev > t:
        raise TimestepError(f"DDIM step must go backwards in time (t={t}, t_prev={t_prev})")
    schedule.check(t)
    if t_prev < -1:
        raise TimestepError(f"t_prev={t_prev} below -1")
    x_t = np.asarray(x_t, dtype=np.float64)
    if eps is None:
        eps = model(x_t, np.full(len(x_t), t))
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_pred = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps


def ddim_sample(model, schedule: NoiseSchedule, x_T, ladder: Sequence[int] | None = None,
                keep_states: bool = False):
    """Run the full DDIM ladder from ``x_T``; optionally return the state fed
    to the model at every step as a list of (t, x_t)."""
    ladder = list(schedule.ladder() if ladder is None else ladder)
    x = np.asarray(x_T, dtype=np.float64)
    states = []
    for k, t in enumerate(ladder):
        t_prev = ladder[k + 1] if k + 1 < len(ladder) else -1
        if keep_states:
            states.append((t, x.copy()))
        x = ddim_step(x, t, t_prev, model, schedule)
    return (x, states) if keep_states else x


# ---------------------------------------------------------------------------
# Toy datasets
# ---------------------------------------------------------------------------

def gaussian_mixture(n, rng, components=2, radius=1.0, std=0.05):
    angles = 2 * np.pi * np.arange(components) / components
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    idx = rng.integers(0, components, size=n)
    return centers[idx] + std * rng.standard_normal((n, 2))


def swiss_roll(n, rng, noise=0.02):
    u = 1.5 * np.pi * (1 + 2 * rng.random(n))
    pts = np.stack([u * np.cos(u), u * np.sin(u)], axis=1) / 10.0
    return pts + noise * rng.standard_normal((n, 2))


def make_dataset(kind: str, n: int, seed: int, **kw) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind in ("gmm", "gmm2"):
        return gaussian_mixture(n, rng, components=kw.get("components", 2),
                                radius=kw.get("radius", 0.5), std=kw.get("std", 0.02))
    if kind == "gmm8":
        return gaussian_mixture(n, rng, components=8, radius=kw.get("radius", 0.5),
                                std=kw.get("std", 0.02))
    if kind == "swiss_roll":
        return swiss_roll(n, rng)
    raise ValueError(f"unknown dataset {kind!r}")


# ---------------------------------------------------------------------------
# Full-precision training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iters: int = 3000
    batch: int = 256
    lr: float = 3e-3
    hidden: int = 64
    depth: int = 3
    emb_dim: int = 16
    activation: str = "silu"
    layernorm: bool = False
    seed: int = 0


@dataclass
class TrainResult:
    model: DenoiserModel
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)


def denoising_loss_fn(model: DenoiserModel):
    """Per-sample squared error of the noise prediction."""
    def fn(params, x_t, t, eps):
        pred = model.forward(params, x_t, t)
        return ops.total(ops.square(ops.sub(pred, eps)), axis=1)
    return fn


def denoising_loss(model: DenoiserModel, schedule: NoiseSchedule, data, seed: int = 1234) -> float:
    """Mean per-element epsilon MSE on ``data`` with noise/timesteps drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, schedule.T_steps, size=len(data))
    eps = rng.standard_normal(data.shape)
    x_t = forward_noise(data, t, eps, schedule)
    pred = model(x_t, t)
    return float(np.mean((pred - eps) ** 2))


def train_fp(dataset, schedule: NoiseSchedule, config: TrainConfig, holdout=None,
             model: DenoiserModel | None = None) -> TrainResult:
    data = np.asarray(dataset, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("training needs a non-empty dataset")
    if model is None:
        model = DenoiserModel.mlp(data.shape[1], config.hidden, config.depth, config.emb_dim,
                                  schedule.T_steps, config.activation, config.layernorm,
                                  seed=config.seed)
    holdout = data if holdout is None else np.asarray(holdout, dtype=np.float64)
    initial = denoising_loss(model, schedule, holdout)
    rng = np.random.default_rng([config.seed, 7])
    opt = Adam(config.lr)
    theta = model.params.data.copy()
    loss_fn = denoising_loss_fn(model)

    def batch_loss(params, x_t, t, eps):
        return ops.mean(loss_fn(params, x_t, t, eps))

    history = []
    for it in range(config.iters):
        idx = rng.integers(0, len(data), size=min(config.batch, len(data)))
        t = rng.integers(0, schedule.T_steps, size=len(idx))
        eps = rng.standard_normal((len(idx), data.shape[1]))
        x_t = forward_noise(data[idx], t, eps, schedule)
        out, tape = gc.forward_record(batch_loss, gc.ParamVector(model.layout, theta), x_t, t, eps)
        loss = float(out)
        if not math.isfinite(loss):
            raise TrainingDivergedError(it, loss)
        grad = gc.backward(tape, 1.0)
        theta = opt.step(theta, grad.data)
        if it % 100 == 0:
            history.append((it, loss))
    trained = model.with_params(gc.ParamVector(model.layout, theta))
    final = denoising_loss(trained, schedule, holdout)
    return TrainResult(trained, initial, final, history)
