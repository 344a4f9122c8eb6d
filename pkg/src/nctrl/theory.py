"""Numerical checks of the identifiability assumptions on a ground-truth generator.

Two checks are provided:

* volume preservation of the mixing (``|det J_g| = 1``), via finite-difference
  Jacobians;
* sufficient variability: linear independence of the 2n derivative vectors
  built from ``eta_kt(c) = log p(z_kt | z_{t-1}, c)``.

Derivatives of ``eta`` are taken by central finite differences with one
Richardson refinement, so the checks work for any generator that exposes a
closed-form conditional density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import GroundTruthDynamics, Mixing

LOG_2PI = float(np.log(2.0 * np.pi))


class TheoryCheckError(RuntimeError):
    pass


def eta(dyn: GroundTruthDynamics, k: int, z_t, z_hist, c: int) -> float:
    """log N(z_kt; f_c(history)_k, sigma_ck^2); ``z_hist`` is (lag, n), row 0 = z_{t-1}."""
    hist = np.asarray(z_hist, dtype=np.float64).reshape(1, -1)
    mu = dyn.mean(hist, c)[0, k]
    sd = dyn.noise_scale[c, k]
    r = (np.asarray(z_t, dtype=np.float64)[k] - mu) / sd
    return float(-0.5 * LOG_2PI - np.log(sd) - 0.5 * r * r)


# ---------------------------------------------------------------------------
# finite-difference stencils on a function of (a, b) = (z_kt, z_{l,t-1})


def _richardson(fn, h: float) -> float:
    return (4.0 * fn(h / 2.0) - fn(h)) / 3.0


def _d1(f, h):
    return (f(h, 0.0) - f(-h, 0.0)) / (2 * h)


def _d2(f, h):
    return (f(h, 0.0) - 2 * f(0.0, 0.0) + f(-h, 0.0)) / (h * h)


def _d11(f, h, k):
    return (f(h, k) - f(h, -k) - f(-h, k) + f(-h, -k)) / (4 * h * k)


def _d21(f, h, k):
    up = f(h, k) - 2 * f(0.0, k) + f(-h, k)
    down = f(h, -k) - 2 * f(0.0, -k) + f(-h, -k)
    return (up - down) / (2 * k * h * h)


@dataclass
class EtaDerivatives:
    d1: np.ndarray  # (n, C)      d eta_k(c) / d z_kt
    d2: np.ndarray  # (n, C)      d2 eta_k(c) / d z_kt^2
    d11: np.ndarray  # (n, C, n)  d2 eta_k(c) / d z_kt d z_{l,t-1}
    d21: np.ndarray  # (n, C, n)  d3 eta_k(c) / d z_kt^2 d z_{l,t-1}


def eta_derivatives(dyn: GroundTruthDynamics, z_t, z_prev, outer: float = 1e-3,
                    inner: float = 1e-3) -> EtaDerivatives:
    """All derivatives entering the variability vectors (lag 1 only)."""
    if dyn.lag != 1:
        raise ValueError("variability vectors are defined for lag 1")
    n, C = dyn.n, dyn.n_regimes
    z_t = np.asarray(z_t, dtype=np.float64)
    z_prev = np.asarray(z_prev, dtype=np.float64).reshape(-1)
    out = EtaDerivatives(np.zeros((n, C)), np.zeros((n, C)), np.zeros((n, C, n)), np.zeros((n, C, n)))
    for k in range(n):
        for c in range(C):
            def f_own(a, _b, k=k, c=c):
                zt = z_t.copy()
                zt[k] += a
                return eta(dyn, k, zt, z_prev, c)

            out.d1[k, c] = _richardson(lambda h: _d1(f_own, h), outer)
            out.d2[k, c] = _richardson(lambda h: _d2(f_own, h), outer)
            for l in range(n):
                def f(a, b, k=k, c=c, l=l):
                    zt = z_t.copy()
                    zp = z_prev.copy()
                    zt[k] += a
                    zp[l] += b
                    return eta(dyn, k, zt, zp, c)

                out.d11[k, c, l] = _richardson(lambda h: _d11(f, h, h * inner / outer), outer)
                out.d21[k, c, l] = _richardson(lambda h: _d21(f, h, h * inner / outer), outer)
            for name, val in (("d1", out.d1[k, c]), ("d2", out.d2[k, c])):
                if not np.isfinite(val):
                    raise TheoryCheckError(f"non-finite {name} at k={k}, c={c}")
            bad = np.flatnonzero(~np.isfinite(out.d11[k, c]) | ~np.isfinite(out.d21[k, c]))
            if bad.size:
                raise TheoryCheckError(f"non-finite derivative at k={k}, l={bad[0]}, c={c}")
    return out


@dataclass
class VariabilityReport:
    z_t: np.ndarray
    z_hist: np.ndarray
    matrix: np.ndarray  # (2n, n*C + C - 1), rows s_1, s°_1, s_2, s°_2, ...
    singular_values: np.ndarray
    rank: int
    passed: bool
    structural_zero_blocks: list[tuple[int, int]] = field(default_factory=list)
    reading: str = "joint: 2n rows {s_k, s°_k} tested together"

    def to_json(self) -> dict:
        return {"z_t": self.z_t.tolist(), "z_hist": self.z_hist.tolist(),
                "shape": list(self.matrix.shape),
                "singular_values": self.singular_values.tolist(), "rank": self.rank,
                "pass": self.passed,
                "structural_zero_blocks": [list(b) for b in self.structural_zero_blocks],
                "reading": self.reading}


def variability_matrix(d: EtaDerivatives) -> np.ndarray:
    n, C = d.d1.shape
    rows = []
    for k in range(n):
        s = np.concatenate([d.d11[k].reshape(-1), np.diff(d.d2[k])])
        s_ring = np.concatenate([d.d21[k].reshape(-1), np.diff(d.d1[k])])
        rows += [s, s_ring]
    return np.array(rows).reshape(2 * n, n * C + C - 1)


def roundoff_floor(dyn: GroundTruthDynamics, z_t, z_prev, outer: float = 1e-3,
                   inner: float = 1e-3) -> float:
    """Rounding-error scale of the third-derivative stencil.

    Each ``eta`` evaluation carries an error of order ``eps * |eta|`` and the
    refined stencil amplifies it by roughly ``44 / (outer**2 * inner)``; the
    constant 256 leaves headroom over what is observed in practice.
    """
    hist = np.asarray(z_prev, dtype=np.float64).reshape(1, -1)
    eta_max = max(abs(eta(dyn, k, z_t, hist, c))
                  for k in range(dyn.n) for c in range(dyn.n_regimes))
    return 256.0 * np.finfo(np.float64).eps * max(eta_max, 1.0) / (outer * outer * inner)


def variability_vectors(dyn: GroundTruthDynamics, z_t, z_hist, rel_tol: float = 1e-6,
                        outer: float = 1e-3, inner: float = 1e-3) -> VariabilityReport:
    """Stack the 2n vectors at one point and test their linear independence.

    Third-derivative entries below the stencil's rounding floor cannot be told
    apart from zero; they are set to zero before the rank is taken and blocks
    made entirely of them are reported as structurally zero.
    """
    z_hist = np.asarray(z_hist, dtype=np.float64).reshape(dyn.lag, dyn.n)
    d = eta_derivatives(dyn, z_t, z_hist[0], outer, inner)
    floor = roundoff_floor(dyn, z_t, z_hist[0], outer, inner)
    small = np.abs(d.d21) <= floor
    d.d21[small] = 0.0
    zeros = [(k, c) for k in range(dyn.n) for c in range(dyn.n_regimes) if small[k, c].all()]
    M = variability_matrix(d)
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > rel_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return VariabilityReport(np.asarray(z_t, float), z_hist, M, sv, rank,
                             rank == 2 * dyn.n, zeros)


def variability_points(z: np.ndarray, count: int, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random (z_t, z_hist) pairs taken from a latent trajectory."""
    rng = np.random.default_rng(seed)
    ts = rng.choice(np.arange(1, len(z)), size=min(count, len(z) - 1), replace=False)
    return [(z[t], z[t - 1:t]) for t in np.sort(ts)]


# ---------------------------------------------------------------------------
# volume preservation


@dataclass
class VolumeReport:
    points: np.ndarray
    log_abs_det: np.ndarray
    deviations: np.ndarray
    singular: list[int]

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.deviations)) if self.deviations.size else 0.0

    def passed(self, tol: float = 1e-6) -> bool:
        return not self.singular and self.max_deviation <= tol

    def to_json(self, tol: float = 1e-6) -> dict:
        return {"points": len(self.points), "max_deviation": self.max_deviation,
                "log_abs_det": self.log_abs_det.tolist(), "singular_points": self.singular,
                "tolerance": tol, "pass": self.passed(tol)}


def jacobian_fd(fn, z: np.ndarray, step: float = 1e-5) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((fn(z + e) - fn(z - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def check_volume(mixing, sample_count: int, seed, n: int | None = None,
                 step: float = 1e-5, points: np.ndarray | None = None) -> VolumeReport:
    """Finite-difference ``log|det J|`` of ``mixing`` at sampled latents.

    ``mixing`` is a :class:`Mixing` or any callable on (n,) vectors. Points
    are drawn from ``points`` rows when given, else from a standard normal.
    """
    rng = np.random.default_rng(seed)
    if points is not None:
        points = np.asarray(points, dtype=np.float64)
        points = points[rng.choice(len(points), size=min(sample_count, len(points)), replace=False)]
    else:
        if n is None:
            if not isinstance(mixing, Mixing):
                raise ValueError("n is required for a plain callable")
            n = mixing.weights[0].shape[0]
        points = rng.standard_normal((sample_count, n))
    logdets = np.empty(len(points))
    singular = []
    for i, z in enumerate(points):
        sign, logdet = np.linalg.slogdet(jacobian_fd(mixing, z, step))
        if sign == 0:
            singular.append(i)
            logdet = np.inf
        logdets[i] = logdet
    return VolumeReport(points, logdets, np.abs(logdets), singular)
