"""Reverse-mode tape over numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var`. Values are
ordinary ``float64`` arrays, so a taped forward pass performs exactly the same
numpy calls as an untaped one and the two agree bit for bit.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeMismatchError, TapeConsumedError


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "parents", "vjp", "name")

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


class Tape:
    """Single-use record of primitive operations.

    Nodes are appended in creation order, which is a topological order of the
    graph; backward walks them in reverse and touches each node once.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}
        self.output: Optional[Var] = None
        self.layout = None
        self.consumed = False

    def leaf(self, value, name: str) -> Var:
        value = np.asarray(value, dtype=np.float64)
        v = Var(value, self, name=name)
        self.leaves[name] = v
        return v

    def gradients(self, output: Var, seed) -> dict[str, np.ndarray]:
        """Accumulate d<seed, output>/d(leaf) for every registered leaf."""
        if self.consumed:
            raise TapeConsumedError("tape has already been consumed by backward()")
        self.consumed = True
        seed = np.asarray(seed, dtype=np.float64)
        if not isinstance(output, Var) or output.tape is not self:
            # output does not depend on any leaf
            return {k: np.zeros_like(v.value) for k, v in self.leaves.items()}
        if seed.shape != output.value.shape:
            raise ShapeMismatchError("<seed>", output.value.shape, seed.shape)
        grads: dict[int, np.ndarray] = {output.index: seed}
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.vjp is None:
                if g is not None:
                    grads[node.index] = g  # keep leaf gradients
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Var):
                    continue
                j = parent.index
                if j in grads:
                    grads[j] = grads[j] + pg
                else:
                    grads[j] = pg
        out = {}
        for name, leaf in self.leaves.items():
            g = grads.get(leaf.index)
            out[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g)
        return out


def value(x):
    """Strip a Var down to its array; pass arrays and scalars through."""
    return x.value if isinstance(x, Var) else x


def find_tape(args: Sequence) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def record(out, parents: tuple, vjp: Callable):
    """Wrap ``out`` as a Var when any parent lives on a tape."""
    tape = find_tape(parents)
    if tape is None:
        return out
    return Var(out, tape, parents, vjp)
