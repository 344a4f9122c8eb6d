"""Autoregressive HMM over observations.

Each regime ``c`` has a Gaussian emission ``p(x_t | x_{t-1}, c)`` whose mean
and diagonal log-variance come from a per-regime MLP. The first observation
uses per-regime ``(mu0, logvar0)``. All recursions run in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.mlp import StackedMlp
from .autodiff.tape import LOG_2PI, Node, Tape

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class ArhmmError(RuntimeError):
    pass


@dataclass(frozen=True)
class Arhmm:
    m: int
    n_regimes: int
    hidden: tuple[int, ...] = (64, 64)
    slope: float = 0.2
    diag_boost: float = 1.0

    @property
    def net(self) -> StackedMlp:
        return StackedMlp("hmm.e", self.n_regimes, (self.m, *self.hidden, 2 * self.m), self.slope)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        C = self.n_regimes
        params = self.net.init(rng)
        params["hmm.logA"] = self.diag_boost * np.eye(C)
        params["hmm.logpi"] = np.zeros(C)
        params["hmm.mu0"] = np.zeros((C, self.m))
        params["hmm.logvar0"] = np.zeros((C, self.m))
        return params

    # -- tape-level pieces -------------------------------------------------

    def transition_log_probs(self, P: dict[str, Node]) -> tuple[Node, Node]:
        return ops.log_softmax(P["hmm.logA"], axis=-1), ops.log_softmax(P["hmm.logpi"], axis=-1)

    def ar_log_emissions(self, P: dict[str, Node], x_prev, x_cur) -> Node:
        """log p(x_cur | x_prev, c) for every regime: (..., N, C) from (..., N, m)."""
        tape = P["hmm.logA"].tape
        x_prev, x_cur = tape.lift(x_prev), tape.lift(x_cur)
        lead = x_prev.shape[:-1]
        flat_prev = x_prev.reshape(-1, self.m)
        out = self.net(P, flat_prev.reshape(1, -1, self.m))  # (C, N, 2m)
        mean = out[:, :, :self.m]
        log_var = ops.clip(out[:, :, self.m:], LOGVAR_MIN, LOGVAR_MAX)
        lp = ops.gaussian_log_density(x_cur.reshape(1, -1, self.m), mean, log_var)  # (C, N)
        return ops.swapaxes(lp, 0, 1).reshape(*lead, self.n_regimes)

    def initial_log_emissions(self, P: dict[str, Node], x0) -> Node:
        """log p(x_1 | c): (..., C) from (..., m)."""
        tape = P["hmm.logA"].tape
        x0 = tape.lift(x0)
        x = x0.reshape(*x0.shape[:-1], 1, self.m)
        log_var = ops.clip(P["hmm.logvar0"], LOGVAR_MIN, LOGVAR_MAX)
        return ops.gaussian_log_density(x, P["hmm.mu0"], log_var)

    def log_emissions(self, P: dict[str, Node], x) -> Node:
        """(T, C) emission log-probs of a full sequence, initial step included."""
        tape = P["hmm.logA"].tape
        x = tape.lift(x)
        first = self.initial_log_emissions(P, x[0]).reshape(1, self.n_regimes)
        if x.shape[0] == 1:
            return first
        rest = self.ar_log_emissions(P, x[:-1], x[1:])
        return ops.concat([first, rest], axis=0)

    def window_log_emissions(self, P: dict[str, Node], windows) -> Node:
        """Emissions for windows carrying one leading context row: (B, W+1, m) -> (B, W, C)."""
        tape = P["hmm.logA"].tape
        windows = tape.lift(windows)
        return self.ar_log_emissions(P, windows[:, :-1], windows[:, 1:])


# ---------------------------------------------------------------------------
# numpy recursions


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis)


@dataclass
class PosteriorMarginals:
    gamma: np.ndarray  # (..., T, C)
    xi: np.ndarray  # (..., T-1, C, C)
    log_likelihood: np.ndarray | float


def _check_emissions(log_B: np.ndarray) -> None:
    bad = np.argwhere(np.isnan(log_B))
    if bad.size:
        *_, t, c = bad[0]
        raise ArhmmError(f"NaN emission log-probability at t={t}, c={c}")


def forward_backward_log(log_pi: np.ndarray, log_A: np.ndarray, log_B: np.ndarray) -> PosteriorMarginals:
    """Exact smoothing for emission log-probs ``log_B`` of shape (..., T, C)."""
    _check_emissions(log_B)
    T = log_B.shape[-2]
    log_alpha = np.empty_like(log_B)
    log_beta = np.empty_like(log_B)
    log_alpha[..., 0, :] = log_pi + log_B[..., 0, :]
    for t in range(1, T):
        log_alpha[..., t, :] = _lse(log_alpha[..., t - 1, :, None] + log_A, axis=-2) + log_B[..., t, :]
    log_beta[..., T - 1, :] = 0.0
    for t in range(T - 2, -1, -1):
        log_beta[..., t, :] = _lse(log_A + (log_B[..., t + 1, :] + log_beta[..., t + 1, :])[..., None, :], axis=-1)
    loglik = _lse(log_alpha[..., T - 1, :], axis=-1)
    gamma = np.exp(log_alpha + log_beta - loglik[..., None, None])
    nxt = (log_B[..., 1:, :] + log_beta[..., 1:, :])[..., None, :]
    xi = np.exp(log_alpha[..., :-1, :, None] + log_A + nxt - loglik[..., None, None, None])
    return PosteriorMarginals(gamma, xi, loglik)


def viterbi_log(log_pi: np.ndarray, log_A: np.ndarray, log_B: np.ndarray) -> np.ndarray:
    """Most probable path; ties go to the smaller regime index."""
    T, C = log_B.shape
    delta = log_pi + log_B[0]
    back = np.zeros((T, C), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + log_A
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(C)] + log_B[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def hmm_log_likelihood(log_pi, log_A, log_B) -> Node:
    """Differentiable sum of sequence log-likelihoods.

    The gradient with respect to each log-term is its posterior expected
    count: gamma for emissions, summed xi for transitions, gamma at t=0 for
    the initial distribution.
    """
    tape = next(v.tape for v in (log_pi, log_A, log_B) if isinstance(v, Node))
    log_pi, log_A, log_B = tape.lift(log_pi), tape.lift(log_A), tape.lift(log_B)
    post = forward_backward_log(log_pi.value, log_A.value, log_B.value)
    value = np.sum(post.log_likelihood)
    pi_shape = log_pi.shape
    A_shape = log_A.shape

    def backward(g):
        g_pi = post.gamma[..., 0, :]
        g_pi = g_pi.reshape(-1, g_pi.shape[-1]).sum(axis=0).reshape(pi_shape) if g_pi.ndim > len(pi_shape) else g_pi
        g_A = post.xi.reshape(-1, *A_shape).sum(axis=0)
        return g * g_pi, g * g_A, g * post.gamma

    return tape.record("hmm_log_likelihood", (log_pi, log_A, log_B), value, backward)


# ---------------------------------------------------------------------------
# public operations on numpy parameter dicts


def _numpy_pieces(model: Arhmm, params: dict[str, np.ndarray], x: np.ndarray):
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    log_A, log_pi = model.transition_log_probs(P)
    log_B = model.log_emissions(P, x)
    return log_pi.value, log_A.value, log_B.value


def emission_log_prob(model: Arhmm, params: dict[str, np.ndarray], x_prev, x_cur, c: int) -> float:
    """log p(x_cur | x_prev, c); ``x_prev=None`` selects the initial emission."""
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    if x_prev is None:
        return float(model.initial_log_emissions(P, np.asarray(x_cur, float)).value[c])
    lp = model.ar_log_emissions(P, np.asarray(x_prev, float)[None], np.asarray(x_cur, float)[None])
    return float(lp.value[0, c])


def forward_backward(model: Arhmm, params: dict[str, np.ndarray], x: np.ndarray) -> PosteriorMarginals:
    if len(x) < 2:
        raise ValueError("forward_backward needs T >= 2")
    return forward_backward_log(*_numpy_pieces(model, params, x))


def viterbi(model: Arhmm, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    log_pi, log_A, log_B = _numpy_pieces(model, params, x)
    _check_emissions(log_B)
    return viterbi_log(log_pi, log_A, log_B)


def hmm_loss(model: Arhmm, P: dict[str, Node], x) -> Node:
    """-log p(x_1:T) on the tape."""
    log_A, log_pi = model.transition_log_probs(P)
    return -hmm_log_likelihood(log_pi, log_A, model.log_emissions(P, x))


def window_hmm_loss(model: Arhmm, P: dict[str, Node], windows) -> Node:
    """Summed -log p over windows with a uniform initial regime distribution.

    ``windows`` is (B, W+1, m); row 0 of each window is conditioning context.
    """
    log_A, _ = model.transition_log_probs(P)
    C = model.n_regimes
    log_B = model.window_log_emissions(P, windows)
    return -hmm_log_likelihood(np.full(C, -np.log(C)), log_A, log_B)


def transition_matrix(params: dict[str, np.ndarray]) -> np.ndarray:
    logits = params["hmm.logA"]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def permute(params: dict[str, np.ndarray], perm) -> dict[str, np.ndarray]:
    """Relabel regimes: new regime ``k`` is old regime ``perm[k]``."""
    perm = np.asarray(perm)
    out = {}
    for k, v in params.items():
        if k == "hmm.logA":
            out[k] = v[np.ix_(perm, perm)]
        elif k.startswith("hmm."):
            out[k] = v[perm]
        else:
            out[k] = v
    return out


__all__ = [
    "Arhmm", "ArhmmError", "LOG_2PI", "PosteriorMarginals", "emission_log_prob",
    "forward_backward", "forward_backward_log", "hmm_log_likelihood", "hmm_loss",
    "permute", "transition_matrix", "viterbi", "viterbi_log", "window_hmm_loss",
]


# ---------------------------------------------------------------------------
# linear-Gaussian warm start
#
# Gradient training of the MLP emissions from a random start settles in
# poor local optima that merge regimes. A closed-form EM on the linear-Gaussian
# special case is cheap enough to run from many starts; the best fit by
# likelihood supplies initial responsibilities and transitions.


@dataclass
class LinearArFit:
    gamma: np.ndarray  # (T-1, C) responsibilities of the AR transitions x_{t-1} -> x_t
    log_A: np.ndarray
    log_likelihood: float
    start: str


def _linear_emissions(X: np.ndarray, Y: np.ndarray, gamma: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Weighted least-squares M-step, returns log N(y | W_c x, S_c): (N, C)."""
    N, m = Y.shape
    out = np.empty((N, gamma.shape[1]))
    for c in range(gamma.shape[1]):
        w = gamma[:, c] + 1e-8
        Xw = X * w[:, None]
        W = np.linalg.solve(Xw.T @ X + ridge * np.eye(X.shape[1]), Xw.T @ Y)
        R = Y - X @ W
        S = (R * w[:, None]).T @ R / w.sum() + ridge * np.eye(m)
        L = np.linalg.cholesky(S)
        sol = np.linalg.solve(L, R.T)
        out[:, c] = -0.5 * (sol ** 2).sum(axis=0) - np.log(np.diag(L)).sum() - 0.5 * m * LOG_2PI
    return out


def _chunked_smoothing(log_B: np.ndarray, log_A: np.ndarray, chunk: int):
    """Smoothing over consecutive chunks, each restarted from a uniform prior.

    Full chunks run as one batch; a shorter remainder runs on its own.
    """
    N, C = log_B.shape
    log_pi = np.full(C, -np.log(C))
    nb = N // chunk
    pieces = []
    if nb:
        pieces.append(forward_backward_log(log_pi, log_A, log_B[:nb * chunk].reshape(nb, chunk, C)))
    if N - nb * chunk:
        pieces.append(forward_backward_log(log_pi, log_A, log_B[nb * chunk:][None]))
    gamma = np.concatenate([p.gamma.reshape(-1, C) for p in pieces])
    A = sum(p.xi.sum(axis=(0, 1)) for p in pieces) + 1e-10
    A /= A.sum(axis=1, keepdims=True)
    return gamma, np.log(A), float(sum(p.log_likelihood.sum() for p in pieces))


def fit_linear_arhmm(x: np.ndarray, gamma: np.ndarray, iters: int = 100, chunk: int = 500,
                     log_A: np.ndarray | None = None, start: str = "", tol: float = 1e-7) -> LinearArFit:
    """EM for ``x_t ~ N(W_c [x_{t-1}, 1], S_c)`` starting from responsibilities ``gamma``.

    Stops early once the relative log-likelihood change drops below ``tol``.
    """
    X = np.hstack([x[:-1], np.ones((len(x) - 1, 1))])
    Y = x[1:]
    C = gamma.shape[1]
    log_A = np.full((C, C), -np.log(C)) if log_A is None else log_A
    ll = -np.inf
    for _ in range(iters):
        gamma, log_A, new = _chunked_smoothing(_linear_emissions(X, Y, gamma), log_A, chunk)
        done = abs(new - ll) <= tol * abs(new)
        ll = new
        if done:
            break
    return LinearArFit(gamma, log_A, ll, start)


def linear_warm_start(x: np.ndarray, n_regimes: int, seed, random_starts: int = 8,
                      iters: int = 100, chunk: int = 500) -> LinearArFit:
    """Best linear ARHMM fit by likelihood over Dirichlet-random starts.

    Each start runs EM to convergence, since short runs rank starts
    unreliably.
    """
    x = np.asarray(x, dtype=np.float64)
    C = n_regimes
    N = len(x) - 1
    if C == 1:
        return LinearArFit(np.ones((N, 1)), np.zeros((1, 1)), 0.0, "single")
    if random_starts < 1:
        raise ValueError("need at least one start")
    rng = np.random.default_rng(seed)
    best = None
    for r in range(random_starts):
        fit = fit_linear_arhmm(x, rng.dirichlet(np.ones(C), N), iters, chunk, start=f"random/{r}")
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    return best
