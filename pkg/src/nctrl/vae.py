"""Per-step MLP encoder/decoder pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.mlp import Mlp
from .autodiff.tape import Node, Tape

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class Vae:
    m: int
    n: int
    enc_hidden: tuple[int, ...] = (128, 128, 128)
    dec_hidden: tuple[int, ...] = (128, 128)
    slope: float = 0.2

    @property
    def encoder(self) -> Mlp:
        return Mlp("vae.enc", (self.m, *self.enc_hidden, 2 * self.n), self.slope)

    @property
    def decoder(self) -> Mlp:
        return Mlp("vae.dec", (self.n, *self.dec_hidden, self.m), self.slope)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {**self.encoder.init(rng), **self.decoder.init(rng)}

    def encode(self, P: dict[str, Node], x) -> tuple[Node, Node]:
        out = self.encoder(P, x)
        mean = out[..., :self.n]
        log_var = ops.clip(out[..., self.n:], LOGVAR_MIN, LOGVAR_MAX)
        return mean, log_var

    def decode(self, P: dict[str, Node], z) -> Node:
        return self.decoder(P, z)


def reparameterize(mean: Node, log_var: Node, u: np.ndarray) -> Node:
    """``mean + exp(log_var / 2) * u`` for a fixed standard-normal draw ``u``."""
    return mean + ops.exp(0.5 * log_var) * u


def recon_loss(x_hat: Node, x) -> Node:
    """Mean squared error over every step and dimension."""
    return ops.square(x_hat - x).mean()


# numpy conveniences ---------------------------------------------------------


def _const(params):
    tape = Tape(grad=False)
    return {k: tape.const(v) for k, v in params.items()}


def encode(model: Vae, params: dict[str, np.ndarray], x) -> tuple[np.ndarray, np.ndarray]:
    mean, log_var = model.encode(_const(params), np.asarray(x, dtype=np.float64))
    return mean.value, log_var.value


def decode(model: Vae, params: dict[str, np.ndarray], z) -> np.ndarray:
    return model.decode(_const(params), np.asarray(z, dtype=np.float64)).value


def sample(mean: np.ndarray, log_var: np.ndarray, seed) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal(np.shape(mean))
    return mean + np.exp(0.5 * np.clip(log_var, LOGVAR_MIN, LOGVAR_MAX)) * u


def reconstruction_error(model: Vae, params: dict[str, np.ndarray], x, z) -> float:
    x_hat = decode(model, params, z)
    return float(np.mean((x_hat - np.asarray(x)) ** 2))
