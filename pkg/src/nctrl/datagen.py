"""Synthetic nonstationary time series with time-delayed latent dynamics.

Generation runs in three steps: a regime sequence from a Markov chain, latent
dynamics ``z_t = f_{c_t}(z_{t-L:t-1}) + sigma_{c_t} * eps_t`` and an invertible
mixing ``x_t = g(z_t)``.

History blocks are flattened most-recent-first: ``[z_{t-1}, ..., z_{t-L}]``.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import checkpoint
from .autodiff.mlp import StackedMlp, glorot_uniform

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Invalid, corrupt or incomplete dataset directory."""


class GenerationError(RuntimeError):
    pass


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


# ---------------------------------------------------------------------------
# regimes


@dataclass
class MarkovChainParams:
    A: np.ndarray
    pi0: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.pi0 = np.asarray(self.pi0, dtype=np.float64)

    @property
    def n_regimes(self) -> int:
        return self.A.shape[0]

    def validate(self) -> None:
        A, pi0 = self.A, self.pi0
        if A.ndim != 2 or A.shape[0] != A.shape[1] or pi0.shape != (A.shape[0],):
            raise ValueError(f"bad chain shapes A={A.shape} pi0={pi0.shape}")
        if (A < 0).any() or (pi0 < 0).any():
            raise ValueError("transition probabilities must be non-negative")
        if np.abs(A.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("rows of A must sum to 1")
        if abs(pi0.sum() - 1.0) > 1e-12:
            raise ValueError("pi0 must sum to 1")


def sample_transition_matrix(n_regimes: int, rng: np.random.Generator,
                             diag_boost: float = 0.5) -> np.ndarray:
    A = rng.dirichlet(np.ones(n_regimes), size=n_regimes) + diag_boost * np.eye(n_regimes)
    return A / A.sum(axis=1, keepdims=True)


def sample_markov_chain(params: MarkovChainParams, T: int, seed) -> np.ndarray:
    params.validate()
    rng = np.random.default_rng(seed)
    cum_A = np.cumsum(params.A, axis=1)
    cum_pi = np.cumsum(params.pi0)
    last = params.n_regimes - 1
    u = rng.random(T)
    c = np.empty(T, dtype=np.int64)
    c[0] = min(np.searchsorted(cum_pi, u[0], side="right"), last)
    for t in range(1, T):
        c[t] = min(np.searchsorted(cum_A[c[t - 1]], u[t], side="right"), last)
    return c


# ---------------------------------------------------------------------------
# latent dynamics


@dataclass
class GroundTruthDynamics:
    """Per-regime transition maps with additive Gaussian noise.

    ``kind="mlp"``: 2-layer LeakyReLU MLP per regime.
    ``kind="linear"``: ``f_c(h) = h @ W_c + b_c``.
    """

    kind: str
    n: int
    n_regimes: int
    lag: int
    params: dict[str, np.ndarray]
    noise_scale: np.ndarray  # (C, n)
    hidden: int = 16
    slope: float = 0.2

    @property
    def net(self) -> StackedMlp:
        sizes = (self.n * self.lag, self.hidden, self.n) if self.kind == "mlp" else (self.n * self.lag, self.n)
        return StackedMlp("f", self.n_regimes, sizes, self.slope)

    def mean_all(self, hist: np.ndarray) -> np.ndarray:
        """Conditional means under every regime: (C, N, n) for hist (N, n*L)."""
        return self.net.numpy(self.params, np.asarray(hist)[None])

    def mean(self, hist: np.ndarray, c) -> np.ndarray:
        hist = np.atleast_2d(hist)
        c = np.broadcast_to(np.asarray(c), (hist.shape[0],))
        return self.mean_all(hist)[c, np.arange(hist.shape[0])]

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = dict(self.params)
        arrays["noise_scale"] = self.noise_scale
        meta = {"kind": self.kind, "n": self.n, "n_regimes": self.n_regimes,
                "lag": self.lag, "hidden": self.hidden, "slope": self.slope}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> GroundTruthDynamics:
        arrays = dict(arrays)
        noise = arrays.pop("noise_scale")
        return cls(params=arrays, noise_scale=noise, **meta)


def sample_dynamics(n: int, n_regimes: int, lag: int, rng: np.random.Generator, *,
                    kind: str = "mlp", hidden: int = 16, slope: float = 0.2,
                    noise: tuple[float, float] = (0.05, 0.15), gain: float = 0.9,
                    offset_scale: float = 0.5) -> GroundTruthDynamics:
    """Draw one transition map per regime.

    Every map is rescaled so the product of its weight spectral norms equals
    ``gain`` (< 1 keeps the rollout bounded); regime-specific output offsets
    of size ``offset_scale`` separate the regimes' fixed points. Noise scales
    are drawn per regime and component, uniformly in ``noise``.
    """
    d_in = n * lag
    params = {}
    if kind == "mlp":
        W1 = np.empty((n_regimes, d_in, hidden))
        W2 = np.empty((n_regimes, hidden, n))
        for k in range(n_regimes):
            a = glorot_uniform(rng, d_in, hidden, (d_in, hidden))
            b = glorot_uniform(rng, hidden, n, (hidden, n))
            b *= gain / (np.linalg.norm(a, 2) * np.linalg.norm(b, 2))
            W1[k], W2[k] = a, b
        params["f.0.W"] = W1
        params["f.0.b"] = rng.uniform(-1.0, 1.0, (n_regimes, 1, hidden))
        params["f.1.W"] = W2
        params["f.1.b"] = offset_scale * rng.uniform(-1.0, 1.0, (n_regimes, 1, n))
    elif kind == "linear":
        W = np.empty((n_regimes, d_in, n))
        for k in range(n_regimes):
            w = rng.standard_normal((d_in, n))
            W[k] = w * gain / np.linalg.norm(w, 2)
        params["f.0.W"] = W
        params["f.0.b"] = offset_scale * rng.uniform(-1.0, 1.0, (n_regimes, 1, n))
    else:
        raise ValueError(f"unknown transition kind {kind!r}")
    noise_scale = rng.uniform(noise[0], noise[1], (n_regimes, n))
    return GroundTruthDynamics(kind, n, n_regimes, lag, params, noise_scale, hidden, slope)


def regimes_distinguishable(dyn: GroundTruthDynamics, rng: np.random.Generator,
                            probes: int = 16, tol: float = 1e-3) -> bool:
    hist = rng.standard_normal((probes, dyn.n * dyn.lag))
    means = dyn.mean_all(hist)
    for a in range(dyn.n_regimes):
        for b in range(a + 1, dyn.n_regimes):
            if np.linalg.norm(means[a] - means[b], axis=1).max() <= tol:
                return False
    return True


def roll_latents(dyn: GroundTruthDynamics, c: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Roll the latent process along ``c``.

    The first ``lag`` rows are standard-normal padding and are returned as
    both ``z`` and ``eps``.
    """
    rng = np.random.default_rng(seed)
    T, n, L = len(c), dyn.n, dyn.lag
    eps = rng.standard_normal((T, n))
    z = np.empty((T, n))
    z[:L] = eps[:L]
    net = dyn.net
    Ws = [dyn.params[f"f.{i}.W"] for i in range(net.n_layers)]
    bs = [dyn.params[f"f.{i}.b"][:, 0] for i in range(net.n_layers)]
    for t in range(L, T):
        k = c[t]
        h = z[t - L:t][::-1].reshape(-1)
        for i in range(net.n_layers):
            h = h @ Ws[i][k] + bs[i][k]
            if i < net.n_layers - 1:
                h = _leaky(h, dyn.slope)
        z[t] = h + dyn.noise_scale[k] * eps[t]
    return z, eps


def history(z: np.ndarray, lag: int) -> np.ndarray:
    """Flattened histories for rows ``lag..T-1``: (T - lag, n * lag)."""
    T = z.shape[0]
    return np.concatenate([z[lag - k:T - k] for k in range(1, lag + 1)], axis=1)


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixingSpec:
    kind: str = "mlp"  # "orthogonal" | "mlp"
    layers: int = 2
    kappa_max: float = 25.0
    slope: float = 0.2
    max_attempts: int = 10000

    @classmethod
    def parse(cls, text: str) -> MixingSpec:
        """``"orthogonal"`` or ``"mlp:<layers>"``."""
        if text == "orthogonal":
            return cls(kind="orthogonal", layers=1)
        if text.startswith("mlp"):
            layers = int(text.split(":", 1)[1]) if ":" in text else 2
            if layers < 1:
                raise ValueError("mlp mixing needs at least one layer")
            return cls(kind="mlp", layers=layers)
        raise ValueError(f"unknown mixing {text!r}")

    def to_meta(self) -> dict:
        return {"kind": self.kind, "layers": self.layers,
                "kappa_max": self.kappa_max, "slope": self.slope}


@dataclass
class Mixing:
    spec: MixingSpec
    weights: list[np.ndarray]
    attempts: int = 0

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = np.asarray(z, dtype=np.float64)
        for i, W in enumerate(self.weights):
            h = h @ W
            if i < len(self.weights) - 1:
                h = _leaky(h, self.spec.slope)
        return h

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        return ({f"g.{i}.W": W for i, W in enumerate(self.weights)},
                self.spec.to_meta())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> Mixing:
        weights = [arrays[f"g.{i}.W"] for i in range(len(arrays))]
        return cls(MixingSpec(**meta), weights)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def sample_mixing(spec: MixingSpec, n: int, rng: np.random.Generator) -> Mixing:
    if spec.kind == "orthogonal":
        return Mixing(spec, [random_orthogonal(n, rng)], 1)
    if spec.kind != "mlp":
        raise ValueError(f"unknown mixing kind {spec.kind!r}")
    weights = []
    attempts = 0
    for _ in range(spec.layers):
        while True:
            attempts += 1
            if attempts > spec.max_attempts:
                raise GenerationError(
                    f"no weight matrix with cond <= {spec.kappa_max} after {attempts - 1} attempts")
            W = rng.uniform(-1.0, 1.0, (n, n))
            W /= np.linalg.norm(W, axis=0, keepdims=True)
            if np.linalg.cond(W) <= spec.kappa_max:
                weights.append(W)
                break
    return Mixing(spec, weights, attempts)


def mix(mixing: Mixing, z: np.ndarray) -> np.ndarray:
    return mixing(z)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class GenConfig:
    n: int = 8
    n_regimes: int = 5
    T: int = 20000
    lag: int = 1
    mixing: MixingSpec = field(default_factory=MixingSpec)
    transition: str = "mlp"
    hidden: int = 16
    noise: tuple[float, float] = (0.05, 0.15)
    gain: float = 0.9
    offset_scale: float = 0.5
    diag_boost: float = 0.5
    seed: int = 0

    def to_meta(self) -> dict:
        return {"n": self.n, "n_regimes": self.n_regimes, "T": self.T, "lag": self.lag,
                "mixing": self.mixing.to_meta(), "transition": self.transition,
                "hidden": self.hidden, "noise": list(self.noise), "gain": self.gain,
                "offset_scale": self.offset_scale, "diag_boost": self.diag_boost,
                "seed": self.seed}


PRESETS = {
    "A": {"mixing": "mlp:2"},
    "B": {"mixing": "mlp:3"},
}


@dataclass
class Dataset:
    x: np.ndarray
    z: np.ndarray | None
    c: np.ndarray
    A: np.ndarray
    pi0: np.ndarray
    meta: dict
    dynamics: GroundTruthDynamics | None = None
    mixing: Mixing | None = None

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def lag(self) -> int:
        return int(self.meta["lag"])

    @property
    def n_regimes(self) -> int:
        return int(self.meta["n_regimes"])


def generate(cfg: GenConfig) -> Dataset:
    if cfg.T <= cfg.lag:
        raise ValueError("T must exceed the lag")
    chain_ss, dyn_ss, lat_ss, mix_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    dyn_rng = np.random.default_rng(dyn_ss)
    A = sample_transition_matrix(cfg.n_regimes, dyn_rng, cfg.diag_boost)
    chain = MarkovChainParams(A, np.full(cfg.n_regimes, 1.0 / cfg.n_regimes))
    for _ in range(100):
        dyn = sample_dynamics(cfg.n, cfg.n_regimes, cfg.lag, dyn_rng, kind=cfg.transition,
                              hidden=cfg.hidden, noise=cfg.noise, gain=cfg.gain,
                              offset_scale=cfg.offset_scale)
        if regimes_distinguishable(dyn, dyn_rng):
            break
    else:
        raise GenerationError("could not draw pairwise distinct regime dynamics")
    c = sample_markov_chain(chain, cfg.T, chain_ss)
    z, _ = roll_latents(dyn, c, lat_ss)
    if not np.isfinite(z).all():
        raise GenerationError("latent rollout diverged")
    mixing = sample_mixing(cfg.mixing, cfg.n, np.random.default_rng(mix_ss))
    x = mixing(z)
    meta = cfg.to_meta()
    meta.update(m=cfg.n, generator_version=__version__, format_version=FORMAT_VERSION,
                has_latents=True)
    return Dataset(x, z, c, A, chain.pi0, meta, dyn, mixing)


_ARRAY_FILES = {"x": ("x.f64", "<f8"), "z": ("z.f64", "<f8"), "c": ("c.u32", "<u4"),
                "A": ("A.f64", "<f8"), "pi0": ("pi0.f64", "<f8")}


def write_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, (fname, dtype) in _ARRAY_FILES.items():
        arr = getattr(ds, key)
        if arr is None:
            continue
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        (directory / fname).write_bytes(raw)
        files[fname] = {"shape": list(np.shape(arr)), "dtype": dtype, "crc32": zlib.crc32(raw)}
    for name, obj in (("dynamics.ckpt", ds.dynamics), ("mixing.ckpt", ds.mixing)):
        if obj is None:
            continue
        arrays, meta = obj.to_arrays()
        blob = checkpoint.dumps(arrays, meta)
        (directory / name).write_bytes(blob)
        files[name] = {"crc32": zlib.crc32(blob)}
    meta = dict(ds.meta)
    meta["has_latents"] = ds.z is not None
    meta["files"] = files
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: invalid JSON ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{directory}: unsupported format version {meta.get('format_version')}")
    files = meta.get("files", {})
    required = ["x.f64", "c.u32", "A.f64", "pi0.f64"]
    if meta.get("has_latents"):
        required.append("z.f64")
    for fname in required:
        if fname not in files:
            raise DatasetError(f"{directory}: meta.json does not describe {fname}")

    def blob(fname):
        path = directory / fname
        if not path.exists():
            raise DatasetError(f"{directory}: missing file {fname} declared in meta.json")
        raw = path.read_bytes()
        if zlib.crc32(raw) != files[fname]["crc32"]:
            raise DatasetError(f"{path}: checksum mismatch")
        return raw

    arrays = {}
    for key, (fname, dtype) in _ARRAY_FILES.items():
        if fname not in files:
            arrays[key] = None
            continue
        raw = blob(fname)
        shape = tuple(files[fname]["shape"])
        expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if len(raw) != expected:
            raise DatasetError(f"{fname}: truncated ({len(raw)} of {expected} bytes)")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        arrays[key] = arr.astype(np.int64) if key == "c" else arr.astype(np.float64)
    dyn = mixing = None
    if "dynamics.ckpt" in files:
        a, m = checkpoint.loads(blob("dynamics.ckpt"))
        dyn = GroundTruthDynamics.from_arrays(a, m)
    if "mixing.ckpt" in files:
        a, m = checkpoint.loads(blob("mixing.ckpt"))
        mixing = Mixing.from_arrays(a, m)
    meta = {k: v for k, v in meta.items() if k != "files"}
    return Dataset(arrays["x"], arrays["z"], arrays["c"], arrays["A"], arrays["pi0"],
                   meta, dyn, mixing)


def export_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    n = 0 if ds.z is None else ds.z.shape[1]
    m = ds.x.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "c"] + [f"z{i}" for i in range(n)] + [f"x{i}" for i in range(m)])
        for t in range(ds.T):
            zs = [] if ds.z is None else [repr(v) for v in ds.z[t]]
            w.writerow([t, int(ds.c[t])] + zs + [repr(v) for v in ds.x[t]])
    return path
