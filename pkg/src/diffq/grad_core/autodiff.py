"""Model-level autodiff entry points built on the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import EmptyBatchError, NonFiniteError
from .params import ParamLayout, ParamVector
from .tape import Tape, Var, value


def _forward_fn(model):
    return model.forward if hasattr(model, "forward") else model


def forward_record(model, params: ParamVector, *inputs):
    """Run ``model`` with every parameter segment as a tape leaf.

    Returns ``(output, tape)``; ``output`` is a plain array equal bit for bit
    to the untaped forward pass.
    """
    tape = Tape()
    tape.layout = params.layout
    leaves = {name: tape.leaf(arr, name) for name, arr in params.arrays().items()}
    out = _forward_fn(model)(leaves, *inputs)
    tape.output = out
    return value(out), tape


def backward(tape: Tape, seed) -> ParamVector:
    """Gradient of ``<seed, output>`` with respect to the recorded parameters."""
    grads = tape.gradients(tape.output, seed)
    return ParamVector.pack(tape.layout, grads)


def value_and_grad(loss_fn: Callable, params: ParamVector, *inputs):
    """Scalar ``loss_fn(params, *inputs)`` and its gradient as a ParamVector."""
    loss, tape = forward_record(loss_fn, params, *inputs)
    loss = float(loss)
    check_finite(loss, "loss")
    return loss, backward(tape, 1.0)


def per_sample_gradient_matrix(loss_fn: Callable, params: ParamVector,
                               batch: Sequence[np.ndarray], method: str = "expand") -> np.ndarray:
    """Per-sample gradients as a (B, P) matrix.

    ``loss_fn(param_dict, *batch)`` must return the vector of per-sample
    losses. With ``method="expand"`` every parameter is broadcast to a
    leading batch axis, so one backward pass yields each sample's gradient
    without summing over the batch. ``method="loop"`` runs one tape per
    sample and serves as the reference path.
    """
    batch = tuple(np.asarray(b) for b in batch)
    if not batch or len(batch[0]) == 0:
        raise EmptyBatchError("per-sample gradients need a non-empty batch")
    n = len(batch[0])
    layout = params.layout
    if method == "loop":
        rows = []
        for i in range(n):
            item = tuple(b[i:i + 1] for b in batch)
            fn = lambda p, *xs: _sum_losses(loss_fn(p, *xs))
            _, g = value_and_grad(fn, params, *item)
            rows.append(g.data)
        return np.stack(rows)
    if method != "expand":
        raise ValueError(f"unknown method {method!r}")
    tape = Tape()
    leaves = {}
    for seg in layout.segments:
        arr = params.view(seg.layer_id)
        leaves[seg.layer_id] = tape.leaf(np.broadcast_to(arr, (n,) + arr.shape).copy(), seg.layer_id)
    losses = loss_fn(leaves, *batch)
    check_finite(value(losses), "per-sample loss")
    grads = tape.gradients(losses, np.ones(n)) if isinstance(losses, Var) else \
        {k: np.zeros((n,) + v.shape[1:]) for k, v in leaves.items()}
    out = np.empty((n, layout.size))
    for seg in layout.segments:
        out[:, seg.offset:seg.offset + seg.length] = grads[seg.layer_id].reshape(n, -1)
    return out


def per_sample_gradients(loss_fn: Callable, params: ParamVector,
                         batch: Sequence[np.ndarray], method: str = "expand") -> list[ParamVector]:
    mat = per_sample_gradient_matrix(loss_fn, params, batch, method=method)
    return [ParamVector(params.layout, row) for row in mat]


def _sum_losses(losses):
    from .ops import total
    return total(losses)


def check_finite(x, what: str = "value"):
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what} encountered")
    return x


def numeric_gradient(loss_fn: Callable, params: ParamVector, *inputs, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar ``loss_fn`` w.r.t. every coordinate."""
    base = params.data
    out = np.empty_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += step
        dn[i] -= step
        fu = float(value(loss_fn(ParamVector(params.layout, up).arrays(), *inputs)))
        fd = float(value(loss_fn(ParamVector(params.layout, dn).arrays(), *inputs)))
        out[i] = (fu - fd) / (2 * step)
    return out


def gradient_check(loss_fn: Callable, params: ParamVector, *inputs, step: float = 1e-5) -> float:
    """Relative error |g_tape - g_fd| / max(|g_tape|, |g_fd|) in the 2-norm."""
    _, g = value_and_grad(loss_fn, params, *inputs)
    num = numeric_gradient(loss_fn, params, *inputs, step=step)
    scale = max(np.linalg.norm(g.data), np.linalg.norm(num))
    return float(np.linalg.norm(g.data - num) / scale) if scale > 0 else 0.0
