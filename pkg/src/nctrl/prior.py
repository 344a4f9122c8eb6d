"""Learned transition prior with a lower-triangular Jacobian.

Component ``i`` maps ``(z_it, history, theta_c)`` to a residual
``eps_it = a_i * z_it + MLP_i(z_it, history, theta_c)``. Because each
residual reads only its own time-t coordinate, the Jacobian of
``(history, z_t) -> (history, eps_t)`` is triangular and

    log p(z_t | history, c) = sum_i log N(eps_it; 0, s_ci^2) + sum_i log |d eps_it / d z_it|.

The diagonal derivatives are carried through the MLP as forward tangents on
the tape, so they are exact and remain differentiable in the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.mlp import glorot_uniform
from .autodiff.tape import Node, Tape

UNDERFLOW = 1e-12


class PriorFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorFlow:
    n: int
    n_regimes: int
    lag: int = 1
    d_theta: int = 8
    hidden: tuple[int, ...] = (64, 64)
    slope: float = 0.2

    @property
    def d_context(self) -> int:
        return self.n * self.lag + self.d_theta

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        n, k = self.n, self.d_context
        sizes = (1 + k, *self.hidden, 1)
        params = {
            "prior.theta": rng.standard_normal((self.n_regimes, self.d_theta)),
            "prior.logscale": np.zeros((self.n_regimes, n)),
            "prior.skip": np.ones(n),
        }
        W0 = glorot_uniform(rng, sizes[0], sizes[1], (n, sizes[0], sizes[1]))
        params["prior.f.0.w_own"] = W0[:, :1, :]
        params["prior.f.0.W"] = W0[:, 1:, :]
        params["prior.f.0.b"] = np.zeros((n, 1, sizes[1]))
        for i in range(1, len(sizes) - 1):
            params[f"prior.f.{i}.W"] = glorot_uniform(rng, sizes[i], sizes[i + 1], (n, sizes[i], sizes[i + 1]))
            params[f"prior.f.{i}.b"] = np.zeros((n, 1, sizes[i + 1]))
        return params

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def residuals(self, P: dict[str, Node], z_t, hist, theta) -> tuple[Node, Node]:
        """Residuals and diagonal derivatives, both (N, n).

        ``z_t`` is (N, n), ``hist`` (N, n*lag) most-recent-first, ``theta``
        (N, d_theta).
        """
        tape = P["prior.skip"].tape
        z_t, hist, theta = tape.lift(z_t), tape.lift(hist), tape.lift(theta)
        N, n = z_t.shape
        own = ops.swapaxes(z_t.reshape(N, n, 1), 0, 1)  # (n, N, 1)
        ctx = ops.concat([hist, theta], axis=-1).reshape(1, N, self.d_context)
        w_own = P["prior.f.0.w_own"]  # (n, 1, H)
        h = own * w_own + ctx @ P["prior.f.0.W"] + P["prior.f.0.b"]
        dh = w_own
        for i in range(1, self.n_layers):
            mask = tape.const(np.where(h.value > 0, 1.0, self.slope))
            h = ops.leaky_relu(h, self.slope)
            dh = dh * mask
            W = P[f"prior.f.{i}.W"]
            h = h @ W + P[f"prior.f.{i}.b"]
            dh = dh @ W
        skip = P["prior.skip"]
        eps = ops.swapaxes(h, 0, 1).reshape(N, n) + z_t * skip
        diag = ops.swapaxes(dh, 0, 1).reshape(N, n) + skip
        return eps, diag

    def log_prob(self, P: dict[str, Node], z_t, hist, c) -> Node:
        """log p(z_t | hist, c) per row: (N,)."""
        c = np.asarray(c, dtype=np.int64)
        theta = P["prior.theta"][c]
        log_scale = P["prior.logscale"][c]
        eps, diag = self.residuals(P, z_t, hist, theta)
        if np.any(np.abs(diag.value) < UNDERFLOW):
            raise PriorFlowError("diagonal derivative underflow: collapsed flow component")
        noise = ops.gaussian_log_density(eps, 0.0, 2.0 * log_scale)
        return noise + ops.log_abs(diag).sum(axis=-1)

    def log_prob_soft(self, P: dict[str, Node], z_t, hist, gamma: np.ndarray) -> Node:
        """Posterior-weighted ``sum_c gamma_c log p(z_t | hist, c)``: (N,)."""
        N = gamma.shape[0]
        total = None
        for k in range(self.n_regimes):
            term = self.log_prob(P, z_t, hist, np.full(N, k)) * gamma[:, k]
            total = term if total is None else total + term
        return total

    def log_det(self, P: dict[str, Node], z_t, hist, c) -> Node:
        """The triangular log-determinant term alone: (N,)."""
        c = np.asarray(c, dtype=np.int64)
        _, diag = self.residuals(P, z_t, hist, P["prior.theta"][c])
        return ops.log_abs(diag).sum(axis=-1)


def _flat_history(z_hist: np.ndarray) -> np.ndarray:
    return np.asarray(z_hist, dtype=np.float64).reshape(1, -1)


def prior_log_prob(flow: PriorFlow, params: dict[str, np.ndarray], z_t, z_hist, c: int) -> float:
    """Numpy convenience: ``z_hist`` is (lag, n) with row 0 = z_{t-1}."""
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    z = np.asarray(z_t, dtype=np.float64).reshape(1, -1)
    return float(flow.log_prob(P, z, _flat_history(z_hist), [c]).value[0])


def residuals(flow: PriorFlow, params: dict[str, np.ndarray], z_t, z_hist, c: int) -> tuple[np.ndarray, np.ndarray]:
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    z = np.asarray(z_t, dtype=np.float64).reshape(1, -1)
    eps, diag = flow.residuals(P, z, _flat_history(z_hist), P["prior.theta"][np.array([c])])
    return eps.value[0], diag.value[0]


def diagonal_derivative(flow: PriorFlow, params: dict[str, np.ndarray], z_t, z_hist, c: int, i: int) -> float:
    """Exact d eps_i / d z_it from the forward tangent."""
    return float(residuals(flow, params, z_t, z_hist, c)[1][i])


def permute(params: dict[str, np.ndarray], perm) -> dict[str, np.ndarray]:
    """Relabel regimes: new regime ``k`` is old regime ``perm[k]``."""
    perm = np.asarray(perm)
    out = dict(params)
    for key in ("prior.theta", "prior.logscale"):
        out[key] = params[key][perm]
    return out
