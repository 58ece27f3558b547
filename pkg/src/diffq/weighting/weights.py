"""Softmax-parameterized sample weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError

S_INIT = 1.0 / 32.0


def softmax_weights(s, tau: float = 1.0) -> np.ndarray:
    """omega = softmax(s / tau), max-shifted for stability.

    Every weight is strictly positive as long as (max(s) - min(s)) / tau stays
    below about 708; beyond that the smallest weights underflow to 0.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ConfigError("scores must be finite")
    z = s / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_pullback(omega, grad_omega, tau: float) -> np.ndarray:
    """Chain a gradient w.r.t. omega back to the scores s."""
    omega = np.asarray(omega)
    g = np.asarray(grad_omega)
    return omega * (g - np.dot(omega, g)) / tau


@dataclass
class SampleWeights:
    s: np.ndarray
    tau: float = 1.0
    iteration: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64).copy()
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")

    @classmethod
    def uniform(cls, n: int, tau: float = 1.0) -> "SampleWeights":
        return cls(np.full(n, S_INIT), tau)

    @property
    def omega(self) -> np.ndarray:
        return softmax_weights(self.s, self.tau)

    def __len__(self):
        return len(self.s)

    def batch_omega(self, ids) -> np.ndarray:
        """Weights restricted to ``ids`` and renormalized over them."""
        return softmax_weights(self.s[np.asarray(ids)], self.tau)

    def copy(self) -> "SampleWeights":
        return SampleWeights(self.s.copy(), self.tau, self.iteration, list(self.history))

    def to_json(self) -> str:
        return json.dumps({"s": self.s.tolist(), "tau": self.tau, "iteration": self.iteration,
                           "history": self.history})

    @classmethod
    def from_json(cls, text: str) -> "SampleWeights":
        d = json.loads(text)
        return cls(np.array(d["s"], dtype=np.float64), d["tau"], d.get("iteration", 0),
                   d.get("history", []))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SampleWeights":
        return cls.from_json(Path(path).read_text())
