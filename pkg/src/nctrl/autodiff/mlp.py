"""Multi-layer perceptrons on top of the tape.

Weights are stored in flat parameter dicts under ``{prefix}.{layer}.W`` and
``{prefix}.{layer}.b``. Hidden layers use LeakyReLU, the last layer is
linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .tape import Node


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class Mlp:
    """A plain MLP: ``sizes = (in, hidden..., out)``."""

    prefix: str
    sizes: tuple[int, ...]
    slope: float = 0.2

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def activations(self) -> list[str]:
        return ["leaky_relu"] * (self.n_layers - 1) + ["identity"]

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.prefix}.{i}.W"] = glorot_uniform(rng, fi, fo, (fi, fo))
            params[f"{self.prefix}.{i}.b"] = np.zeros(fo)
        return params

    def __call__(self, P: dict[str, Node], x: Node) -> Node:
        h = x
        for i in range(self.n_layers):
            h = h @ P[f"{self.prefix}.{i}.W"] + P[f"{self.prefix}.{i}.b"]
            if i < self.n_layers - 1:
                h = T.leaky_relu(h, self.slope)
        return h

    def numpy(self, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        h = x
        for i in range(self.n_layers):
            h = h @ params[f"{self.prefix}.{i}.W"] + params[f"{self.prefix}.{i}.b"]
            if i < self.n_layers - 1:
                h = np.where(h > 0, h, self.slope * h)
        return h


@dataclass(frozen=True)
class StackedMlp:
    """``count`` independent MLPs of identical shape evaluated in one batch.

    Weights carry a leading ``count`` axis: ``W`` is (count, in, out) and
    ``b`` is (count, 1, out). Inputs broadcast as (count or 1, N, in) and the
    output is (count, N, out).
    """

    prefix: str
    count: int
    sizes: tuple[int, ...]
    slope: float = 0.2

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.prefix}.{i}.W"] = glorot_uniform(rng, fi, fo, (self.count, fi, fo))
            params[f"{self.prefix}.{i}.b"] = np.zeros((self.count, 1, fo))
        return params

    def __call__(self, P: dict[str, Node], x: Node) -> Node:
        h = x
        for i in range(self.n_layers):
            h = h @ P[f"{self.prefix}.{i}.W"] + P[f"{self.prefix}.{i}.b"]
            if i < self.n_layers - 1:
                h = T.leaky_relu(h, self.slope)
        return h

    def numpy(self, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        h = x
        for i in range(self.n_layers):
            h = h @ params[f"{self.prefix}.{i}.W"] + params[f"{self.prefix}.{i}.b"]
            if i < self.n_layers - 1:
                h = np.where(h > 0, h, self.slope * h)
        return h


def subset(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Entries whose name starts with ``prefix + '.'``."""
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}
