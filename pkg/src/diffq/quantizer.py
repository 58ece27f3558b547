"""Uniform affine weight quantization with learnable (AdaRound) rounding and
block-wise reconstruction."""

from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grad_core as gc
from .diffusion import DenoiserModel
from .errors import CalibrationError, ShapeMismatchError
from .grad_core import ops
from .grad_core.layers import Dense
from .optim import Adam

# rectified-sigmoid stretch (AdaRound convention)
ZETA = 1.1
GAMMA = -0.1
STRETCH = 1.2  # ZETA - GAMMA, written as a literal so that h(0) == 0.5 exactly
_SLACK = 1e-12  # keeps the gradient alive at h == 0 / h == 1 (round-to-nearest init)


@dataclass
class QuantConfig:
    bits: int = 4
    per_channel: bool = True
    symmetric: bool = True
    lam: float = 0.01
    b_start: float = 20.0
    b_end: float = 2.0
    warmup: float = 0.2
    iters: int = 2000
    lr: float = 1e-2
    act_bits: int = 0            # 0 disables activation quantization; 8 gives W4A8
    learn_scale: bool = False
    batch_size: int | None = None  # None: full batch every iteration

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"weight bits must be in [2, 8], got {self.bits}")
        if self.iters <= 0:
            raise ValueError("iterations per block must be positive")
        if self.act_bits not in (0,) and not 2 <= self.act_bits <= 16:
            raise ValueError(f"activation bits must be 0 or in [2, 16], got {self.act_bits}")


@dataclass
class QuantizedLayer:
    layer_id: str
    bits: int
    scale: np.ndarray          # per output channel (or shape (1,) per tensor)
    zero_point: np.ndarray     # integer-valued, same shape as scale
    qmin: int
    qmax: int
    V: np.ndarray              # rounding scores, shaped like the weights
    frozen: bool = False
    base_scale: np.ndarray | None = None  # scale that defines the floor grid

    def __post_init__(self):
        if self.base_scale is None:
            self.base_scale = self.scale.copy()
        if np.any(self.scale <= 0):
            raise ValueError(f"layer {self.layer_id}: scale must be positive")

    def h(self) -> np.ndarray:
        soft = rectified_sigmoid(self.V)
        if self.frozen:
            return hard_rounding(soft)
        return soft


@dataclass
class ActQuant:
    scale: float
    zero_point: int
    qmax: int


def rectified_sigmoid(V):
    """h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)."""
    return ops.clip(ops.add(ops.mul(ops.sigmoid(V), STRETCH), GAMMA), 0.0, 1.0, slack=_SLACK)


def hard_rounding(h: np.ndarray) -> np.ndarray:
    """Binarize soft rounding; exactly 0.5 rounds up."""
    return np.where(np.asarray(h) >= 0.5, 1.0, 0.0)


def inverse_rectified_sigmoid(h: np.ndarray) -> np.ndarray:
    p = (np.asarray(h, dtype=np.float64) - GAMMA) / STRETCH
    return np.log(p / (1.0 - p))


def _int_range(bits, symmetric):
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


def minmax_params(w: np.ndarray, bits: int, symmetric: bool, per_channel: bool, layer_id="?"):
    """Scale and zero-point from the weight range; column axis = output channel."""
    qmin, qmax = _int_range(bits, symmetric)
    axis = 0 if per_channel else None
    keep = (1,) if not per_channel else (w.shape[1],)
    if symmetric:
        scale = np.abs(w).max(axis=axis).reshape(keep) / qmax
        zp = np.zeros(keep)
    else:
        lo = np.minimum(w.min(axis=axis), 0.0).reshape(keep)
        hi = np.maximum(w.max(axis=axis), 0.0).reshape(keep)
        scale = (hi - lo) / (qmax - qmin)
        zp = np.zeros(keep)
        ok = scale > 0
        zp[ok] = np.round(-lo[ok] / scale[ok])
    dead = ~(scale > 0)
    if np.any(dead):
        warnings.warn(f"layer {layer_id}: constant-zero weights, scale falls back to 1.0",
                      RuntimeWarning, stacklevel=3)
        scale = np.where(dead, 1.0, scale)
        zp = np.where(dead, 0.0, zp)
    return scale, zp, qmin, qmax


def fake_quant(w, layer: QuantizedLayer, V=None, scale=None):
    """Quantize-dequantize ``w``: scale * (clip(floor(w/s) + h(V) + z, qmin, qmax) - z).

    ``V`` (default: the layer's scores) may be a tape Var, in which case the
    result is differentiable through h. A frozen layer uses binary rounding.
    ``scale`` overrides the dequantization scale (learnable-scale mode);
    the floor grid always uses ``layer.base_scale``.
    """
    w_val = gc.value(w)
    if np.shape(w_val) != layer.V.shape and np.shape(w_val)[-2:] != layer.V.shape:
        raise ShapeMismatchError(layer.layer_id, layer.V.shape, np.shape(w_val))
    base = np.floor(w_val / layer.base_scale)
    if layer.frozen and V is None:
        h = layer.h()
    else:
        h = rectified_sigmoid(layer.V if V is None else V)
    q = ops.clip(ops.add(h, base + layer.zero_point), float(layer.qmin), float(layer.qmax))
    s = layer.scale if scale is None else scale
    return ops.mul(ops.sub(q, layer.zero_point), s)


def act_fake_quant(x, aq: ActQuant):
    s = aq.scale
    q = ops.clip(ops.add(ops.round_ste(ops.mul(x, 1.0 / s)), float(aq.zero_point)), 0.0, float(aq.qmax))
    return ops.mul(ops.sub(q, float(aq.zero_point)), s)


@dataclass
class QuantState:
    fp: DenoiserModel
    layers: dict
    act: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    config: QuantConfig = field(default_factory=QuantConfig)

    def copy(self) -> "QuantState":
        return QuantState(self.fp, copy.deepcopy(self.layers), copy.deepcopy(self.act),
                          list(self.warnings), self.config)

    def weight_fn(self, overrides=None, scales=None):
        """Effective-weight hook for DenoiserModel.run_layers."""
        overrides = overrides or {}
        scales = scales or {}

        def fn(layer_id, w):
            layer = self.layers.get(layer_id)
            if layer is None:
                return w
            return fake_quant(w, layer, V=overrides.get(layer_id), scale=scales.get(layer_id))
        return fn

    def input_fn(self):
        if not self.act:
            return None

        def fn(layer_id, h):
            aq = self.act.get(layer_id)
            return h if aq is None else act_fake_quant(h, aq)
        return fn

    def effective_params(self) -> gc.ParamVector:
        """Dequantized weights (biases untouched) in the FP model's layout."""
        arrays = dict(self.fp.params.arrays())
        for lid, layer in self.layers.items():
            arrays[f"{lid}.w"] = np.asarray(fake_quant(arrays[f"{lid}.w"], layer))
        return gc.ParamVector.pack(self.fp.layout, arrays)

    def forward(self, x, t):
        p = self.fp.params.arrays()
        return self.fp.forward(p, x, t, weight_fn=self.weight_fn(), input_fn=self.input_fn())

    def rounding_vector(self) -> gc.ParamVector:
        return gc.ParamVector.from_arrays({f"{lid}.V": l.V for lid, l in self.layers.items()})

    # -- persistence: QCW1 container with the V scores plus a JSON sidecar
    def save(self, path):
        gc.save(self.rounding_vector(), path)
        side = {
            "layers": {lid: {"bits": l.bits, "scale": l.scale.tolist(),
                             "base_scale": l.base_scale.tolist(),
                             "zero_point": [int(z) for z in l.zero_point], "qmin": l.qmin,
                             "qmax": l.qmax, "frozen": l.frozen}
                       for lid, l in self.layers.items()},
            "act": {lid: asdict(a) for lid, a in self.act.items()},
            "warnings": self.warnings,
            "config": asdict(self.config),
        }
        Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, fp: DenoiserModel) -> "QuantState":
        side = json.loads(Path(str(path) + ".json").read_text())
        pv = gc.load(path)
        layers = {}
        for lid, d in side["layers"].items():
            shape = fp.params.view(f"{lid}.w").shape
            layers[lid] = QuantizedLayer(lid, d["bits"], np.array(d["scale"]),
                                         np.array(d["zero_point"], dtype=np.float64), d["qmin"],
                                         d["qmax"], pv.view(f"{lid}.V").reshape(shape).copy(),
                                         d["frozen"], np.array(d["base_scale"]))
        act = {lid: ActQuant(**a) for lid, a in side["act"].items()}
        return cls(fp, layers, act, list(side["warnings"]), QuantConfig(**side["config"]))


def init_quant(fp: DenoiserModel, cfg: QuantConfig) -> QuantState:
    """Min-max ranges per layer; V set so that h(V) equals the round-to-nearest
    offset, i.e. the soft-quantized model starts at the RTN model."""
    layers, notes = {}, []
    for dense in fp.dense_layers():
        w = fp.params.view(f"{dense.id}.w")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            scale, zp, qmin, qmax = minmax_params(w, cfg.bits, cfg.symmetric, cfg.per_channel,
                                                  dense.id)
        for c in caught:
            notes.append(str(c.message))
            warnings.warn(c.message, c.category, stacklevel=2)
        frac = w / scale - np.floor(w / scale)
        h0 = hard_rounding(frac)
        # aim just outside [0, 1] so the clip returns exactly 0 or 1 while the
        # slack keeps the gradient alive
        target = h0 + (h0 - 0.5) * _SLACK
        layers[dense.id] = QuantizedLayer(dense.id, cfg.bits, scale, zp, qmin, qmax,
                                          inverse_rectified_sigmoid(target))
    return QuantState(fp, layers, {}, notes, cfg)


def calibrate_activations(state: QuantState, x, t, bits: int = 8) -> QuantState:
    """Static min-max ranges for the input of every quantized dense layer,
    measured on the full-precision model."""
    new = state.copy()
    ranges = {}

    def spy(layer_id, h):
        v = np.asarray(gc.value(h))
        ranges[layer_id] = (min(float(v.min()), 0.0), max(float(v.max()), 0.0))
        return h

    fp = state.fp
    fp.forward(fp.params.arrays(), x, t, input_fn=spy)
    qmax = 2 ** bits - 1
    for lid, (lo, hi) in ranges.items():
        if lid not in state.layers:
            continue
        scale = (hi - lo) / qmax if hi > lo else 1.0
        new.act[lid] = ActQuant(scale, int(round(-lo / scale)), qmax)
    return new


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockPlan:
    blocks: tuple

    @classmethod
    def per_layer(cls, model: DenoiserModel) -> "BlockPlan":
        return cls(tuple((d.id,) for d in model.dense_layers()))

    @classmethod
    def single(cls, model: DenoiserModel) -> "BlockPlan":
        return cls((tuple(d.id for d in model.dense_layers()),))

    def validate(self, model: DenoiserModel):
        order = [d.id for d in model.dense_layers()]
        flat = [lid for b in self.blocks for lid in b]
        if sorted(flat) != sorted(order) or len(set(flat)) != len(flat):
            raise ValueError("every quantizable layer must appear in exactly one block")
        if flat != order:
            raise ValueError("blocks must follow the forward order of the model")

    def span(self, model: DenoiserModel, k: int) -> tuple[int, int]:
        """Layer-index range [start, stop) that block k covers (trailing
        activations and norms included)."""
        block = self.blocks[k]
        start = model.layer_index(block[0])
        stop = model.layer_index(block[-1]) + 1
        while stop < len(model.layers) and not isinstance(model.layers[stop], Dense):
            stop += 1
        return start, stop


class BlockObjective:
    """Per-sample block reconstruction loss ||f_FP(x_i) - f_Q(x_i)||^2 as a function
    of the block's rounding scores (and optionally scales).

    The block input on the quantized side comes from the already-quantized
    upstream blocks; the target is the full-precision block output.
    """

    def __init__(self, state: QuantState, plan: BlockPlan, k: int, x, t, learn_scale=False):
        self.state = state
        self.plan = plan
        self.k = k
        self.block = plan.blocks[k]
        fp = state.fp
        self.start, self.stop = plan.span(fp, k)
        self.learn_scale = learn_scale
        p = fp.params.arrays()
        emb = fp.embed(x, t)
        self.params = p
        h_fp = fp.run_layers(p, emb, 0, self.start)
        self.target = fp.run_layers(p, h_fp, self.start, self.stop)
        self.inputs = fp.run_layers(p, emb, 0, self.start, weight_fn=state.weight_fn(),
                                    input_fn=state.input_fn())
        shapes = {f"{lid}.V": state.layers[lid].V.shape for lid in self.block}
        if learn_scale:
            shapes.update({f"{lid}.scale": state.layers[lid].scale.shape for lid in self.block})
        self.layout = gc.ParamLayout.from_shapes(shapes)

    @property
    def n_samples(self) -> int:
        return len(self.target)

    def theta0(self) -> gc.ParamVector:
        arrays = {f"{lid}.V": self.state.layers[lid].V for lid in self.block}
        if self.learn_scale:
            arrays.update({f"{lid}.scale": self.state.layers[lid].scale for lid in self.block})
        return gc.ParamVector.pack(self.layout, arrays)

    def loss_fn(self, ids=None):
        """Closure ``f(theta_dict, inputs, target) -> per-sample losses``."""
        state, fp = self.state, self.state.fp

        def fn(theta, inputs, target):
            overrides = {lid: theta[f"{lid}.V"] for lid in self.block}
            scales = None
            if self.learn_scale:
                scales = {}
                for lid in self.block:
                    sc = theta[f"{lid}.scale"]
                    if gc.value(sc).ndim == 2:  # per-sample expansion: (B, out) -> (B, 1, out)
                        b, n = gc.value(sc).shape
                        sc = ops.reshape(sc, (b, 1, n))
                    scales[lid] = sc
            out = fp.run_layers(self.params, inputs, self.start, self.stop,
                                weight_fn=state.weight_fn(overrides, scales),
                                input_fn=state.input_fn())
            return ops.total(ops.square(ops.sub(out, target)), axis=-1)
        return fn

    def _select(self, ids):
        if ids is None:
            return self.inputs, self.target
        ids = np.asarray(ids)
        return self.inputs[ids], self.target[ids]

    def losses(self, theta: gc.ParamVector, ids=None) -> np.ndarray:
        xs, ys = self._select(ids)
        return np.asarray(self.loss_fn()(theta.arrays(), xs, ys))

    def loss_and_grad(self, theta: gc.ParamVector, ids=None, weights=None):
        """Mean (or ``weights``-weighted sum) of per-sample losses and its gradient."""
        xs, ys = self._select(ids)
        fn = self.loss_fn()
        n = len(xs)

        def scalar(p, a, b):
            per = fn(p, a, b)
            if weights is None:
                return ops.mul(ops.total(per), 1.0 / n)
            return ops.total(ops.mul(per, weights))

        return gc.value_and_grad(scalar, theta, xs, ys)

    def per_sample_gradients(self, theta: gc.ParamVector, ids=None) -> np.ndarray:
        xs, ys = self._select(ids)
        return gc.per_sample_gradient_matrix(self.loss_fn(), theta, (xs, ys))


class OutputObjective(BlockObjective):
    """Per-sample denoiser output error ||eps_FP - eps_Q||^2 as a function of
    block k's rounding scores.

    Upstream blocks use their frozen rounding; downstream layers stay at full
    precision (``downstream="fp"``) or at their current quantized state
    (``downstream="quant"``), so the loss isolates the effect of block k.
    """

    def __init__(self, state: QuantState, plan: BlockPlan, k: int, x, t, downstream="fp"):
        if downstream not in ("fp", "quant"):
            raise ValueError(f"downstream must be 'fp' or 'quant', got {downstream!r}")
        super().__init__(state, plan, k, x, t, learn_scale=False)
        fp = state.fp
        self.downstream = downstream
        self.target = fp.run_layers(self.params, fp.embed(x, t))
        self.upstream = {lid for blk in plan.blocks[:k] for lid in blk}

    def loss_fn(self, ids=None):
        state, fp = self.state, self.state.fp
        keep = set(self.block) | self.upstream

        def fn(theta, inputs, target):
            overrides = {lid: theta[f"{lid}.V"] for lid in self.block}
            inner = state.weight_fn(overrides)

            def wfn(layer_id, w):
                if self.downstream == "fp" and layer_id not in keep:
                    return w
                return inner(layer_id, w)
            out = fp.run_layers(self.params, inputs, self.start, None, weight_fn=wfn,
                                input_fn=state.input_fn())
            return ops.total(ops.square(ops.sub(out, target)), axis=-1)
        return fn


class AnnealedB:
    """Regularizer exponent: b_start until the warmup fraction, then linear to b_end."""

    def __init__(self, iters, warmup, b_start, b_end):
        self.iters, self.start = iters, int(warmup * iters)
        self.b_start, self.b_end = b_start, b_end

    def active(self, it) -> bool:
        return it >= self.start

    def __call__(self, it) -> float:
        if it < self.start:
            return self.b_start
        rel = (it - self.start) / max(self.iters - self.start, 1)
        return self.b_end + (self.b_start - self.b_end) * max(0.0, 1.0 - rel)


def rounding_regularizer(V, b: float):
    """sum(1 - |2 h(V) - 1|^b)."""
    h = rectified_sigmoid(V)
    return ops.total(ops.sub(1.0, ops.abs_pow(ops.sub(ops.mul(h, 2.0), 1.0), b)))


@dataclass
class BlockReport:
    block: int
    layers: tuple
    init_loss: float          # weighted reconstruction error before calibration
    final_loss: float         # weighted error after freezing
    history: list             # reconstruction term per logged iteration
    h_min: float = 0.0
    h_max: float = 1.0


def block_calibrate(state: QuantState, plan: BlockPlan, k: int, x, t, weights,
                    cfg: QuantConfig | None = None, rng=None, log_every: int = 50,
                    objective: BlockObjective | None = None) -> tuple[QuantState, BlockReport]:
    """Minimise sum_i w_i ||f_FP(x_i) - f_Q(x_i)||^2 + lam * round-reg over block k,
    then freeze the block's rounding to binary."""
    cfg = cfg or state.config
    block = plan.blocks[k]
    for prev in plan.blocks[:k]:
        for lid in prev:
            if not state.layers[lid].frozen:
                raise ValueError(f"block {k}: upstream layer {lid} is not frozen")
    obj = objective or BlockObjective(state, plan, k, x, t, learn_scale=cfg.learn_scale)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (obj.n_samples,):
        raise ShapeMismatchError(f"block{k}.weights", (obj.n_samples,), w.shape)
    theta = obj.theta0()
    fn = obj.loss_fn()
    anneal = AnnealedB(cfg.iters, cfg.warmup, cfg.b_start, cfg.b_end)
    opt = Adam(cfg.lr)
    rng = rng or np.random.default_rng(0)
    init_loss = float(np.dot(w, obj.losses(theta)))
    history = []
    h_lo, h_hi = 1.0, 0.0
    for it in range(cfg.iters):
        if cfg.batch_size is None or cfg.batch_size >= obj.n_samples:
            xs, ys, ws = obj.inputs, obj.target, w
        else:
            ids = np.sort(rng.choice(obj.n_samples, size=cfg.batch_size, replace=False))
            xs, ys = obj.inputs[ids], obj.target[ids]
            ws = w[ids] * (obj.n_samples / cfg.batch_size)
        use_reg = anneal.active(it) and cfg.lam > 0
        b = anneal(it)

        def objective_fn(p, a, c):
            rec = ops.total(ops.mul(fn(p, a, c), ws))
            if not use_reg:
                return rec
            reg = None
            for lid in block:
                r = rounding_regularizer(p[f"{lid}.V"], b)
                reg = r if reg is None else ops.add(reg, r)
            return ops.add(rec, ops.mul(reg, cfg.lam))

        out, tape = gc.forward_record(objective_fn, theta, xs, ys)
        loss = float(out)
        if not math.isfinite(loss):
            raise CalibrationError(k, it, loss)
        grad = gc.backward(tape, 1.0)
        theta = gc.ParamVector(theta.layout, opt.step(theta.data, grad.data))
        for lid in block:
            hv = np.asarray(rectified_sigmoid(theta.view(f"{lid}.V")))
            h_lo, h_hi = min(h_lo, float(hv.min())), max(h_hi, float(hv.max()))
        if it % log_every == 0 or it == cfg.iters - 1:
            history.append((it, float(np.dot(ws, np.asarray(fn(theta.arrays(), xs, ys))))))
    new = state.copy()
    for lid in block:
        layer = new.layers[lid]
        layer.V = theta.view(f"{lid}.V").copy()
        if cfg.learn_scale:
            layer.scale = np.maximum(theta.view(f"{lid}.scale").copy(), 1e-12)
        layer.frozen = True
    final = _frozen_block_loss(new, plan, k, obj, w)
    return new, BlockReport(k, tuple(block), init_loss, final, history, h_lo, h_hi)


def _frozen_block_loss(state: QuantState, plan: BlockPlan, k: int, obj: BlockObjective, w):
    fp = state.fp
    out = fp.run_layers(obj.params, obj.inputs, obj.start, obj.stop, weight_fn=state.weight_fn(),
                        input_fn=state.input_fn())
    return float(np.dot(w, np.sum((out - obj.target) ** 2, axis=1)))


def model_output_errors(state: QuantState, x, t) -> np.ndarray:
    """Per-sample ||f_FP(x, t) - f_Q(x, t)||^2 of the full denoiser output."""
    fp = state.fp
    ref = fp(x, t)
    out = state.forward(x, t)
    return np.sum((np.asarray(out) - ref) ** 2, axis=1)
