"""Recovery metrics: matched latent correlation, regime accuracy, A error."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

MAX_EXHAUSTIVE_REGIMES = 8


@dataclass
class MccReport:
    mcc: float
    corr: np.ndarray  # |corr|, rows = true components, cols = estimated
    assignment: np.ndarray  # assignment[i] = estimated column matched to true i
    mode: str
    constant_columns: list[str] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.constant_columns)

    def matched(self) -> np.ndarray:
        return self.corr[np.arange(len(self.assignment)), self.assignment]


@dataclass
class RegimeReport:
    accuracy: float
    permutation: np.ndarray  # permutation[k] = true label of estimated label k
    A_mse: float


def _standardize(a: np.ndarray, label: str, flags: list[str]) -> np.ndarray:
    a = a - a.mean(axis=0)
    sd = a.std(axis=0)
    const = sd == 0
    for j in np.flatnonzero(const):
        flags.append(f"{label}[{j}]")
    sd = np.where(const, 1.0, sd)
    out = a / sd
    out[:, const] = 0.0
    return out


def correlation_matrix(z_true: np.ndarray, z_est: np.ndarray, mode: str = "spearman",
                       flags: list[str] | None = None) -> np.ndarray:
    """Absolute Pearson or Spearman correlations, true components on rows."""
    z_true = np.asarray(z_true, dtype=np.float64)
    z_est = np.asarray(z_est, dtype=np.float64)
    if z_true.shape[0] != z_est.shape[0]:
        raise ValueError(f"length mismatch {z_true.shape} vs {z_est.shape}")
    if z_true.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    if mode == "spearman":
        z_true = rankdata(z_true, axis=0)
        z_est = rankdata(z_est, axis=0)
    elif mode != "pearson":
        raise ValueError(f"unknown mode {mode!r}")
    flags = [] if flags is None else flags
    a = _standardize(z_true, "true", flags)
    b = _standardize(z_est, "est", flags)
    return np.abs(a.T @ b) / a.shape[0]


def linear_assignment(score: np.ndarray) -> np.ndarray:
    """Column assigned to each row maximizing the total score (square input)."""
    rows, cols = linear_sum_assignment(score, maximize=True)
    out = np.empty(score.shape[0], dtype=np.int64)
    out[rows] = cols
    return out


def mcc(z_true: np.ndarray, z_est: np.ndarray, mode: str = "spearman") -> MccReport:
    flags: list[str] = []
    corr = correlation_matrix(z_true, z_est, mode, flags)
    assignment = linear_assignment(corr)
    value = float(corr[np.arange(len(assignment)), assignment].mean())
    return MccReport(value, corr, assignment, mode, flags)


def regime_accuracy(c_true, c_est, n_regimes: int) -> tuple[float, np.ndarray]:
    """Best accuracy over all relabelings of ``c_est``.

    Returns the accuracy and the permutation ``sigma`` with
    ``sigma[c_est] == c_true`` as often as possible.
    """
    if n_regimes > MAX_EXHAUSTIVE_REGIMES:
        raise ValueError(f"exhaustive search limited to C <= {MAX_EXHAUSTIVE_REGIMES}; "
                         "use assignment-based matching (linear_assignment on the confusion matrix)")
    c_true = np.asarray(c_true, dtype=np.int64)
    c_est = np.asarray(c_est, dtype=np.int64)
    if c_true.shape != c_est.shape:
        raise ValueError("label sequences differ in length")
    for name, c in (("c_true", c_true), ("c_est", c_est)):
        if c.size and (c.min() < 0 or c.max() >= n_regimes):
            raise ValueError(f"{name} has labels outside [0, {n_regimes})")
    confusion = np.zeros((n_regimes, n_regimes))
    np.add.at(confusion, (c_est, c_true), 1.0)
    perms = np.array(list(itertools.permutations(range(n_regimes))))
    hits = confusion[np.arange(n_regimes), perms].sum(axis=1)
    best = int(np.argmax(hits))
    return float(hits[best] / max(len(c_true), 1)), perms[best]


def relabel_matrix(A_est: np.ndarray, sigma) -> np.ndarray:
    """Express ``A_est`` in true-label coordinates: out[sigma[k], sigma[l]] = A_est[k, l]."""
    sigma = np.asarray(sigma)
    out = np.empty_like(A_est)
    out[np.ix_(sigma, sigma)] = A_est
    return out


def transition_mse(A_true: np.ndarray, A_est: np.ndarray, sigma) -> float:
    A_true = np.asarray(A_true, dtype=np.float64)
    A_est = np.asarray(A_est, dtype=np.float64)
    if A_true.shape != A_est.shape or A_true.shape[0] != len(sigma):
        raise ValueError(f"shape mismatch: {A_true.shape}, {A_est.shape}, sigma of {len(sigma)}")
    return float(np.mean((A_true - relabel_matrix(A_est, sigma)) ** 2))


def regime_report(c_true, c_est, A_true, A_est) -> RegimeReport:
    C = np.asarray(A_true).shape[0]
    acc, sigma = regime_accuracy(c_true, c_est, C)
    return RegimeReport(acc, sigma, transition_mse(A_true, A_est, sigma))
