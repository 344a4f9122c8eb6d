"""Two-stage training: ARHMM on observations, then joint VAE + prior + ARHMM.

Stage 1 fits the ARHMM alone. Stage 2 optimizes

    lambda_hmm * L_hmm + L_recon + beta * L_kld

on random windows, where the prior inside ``L_kld`` is conditioned on regime
labels decoded by Viterbi from the current ARHMM every ``redecode_every``
steps. Ground-truth latents and labels are only read for metric snapshots.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arhmm as hmm_mod
from . import metrics
from .arhmm import Arhmm
from .autodiff import checkpoint, ops
from .autodiff.tape import Node, Tape
from .datagen import Dataset
from .optim import Adam, PlateauDecay
from .prior import PriorFlow
from .vae import Vae, recon_loss, reparameterize

log = logging.getLogger(__name__)

DIVERGENCE = 1e6
EMISSION_FIT_LR = 3e-3  # responsibility-weighted emission fit after the linear warm start


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite or exceeded the divergence bound."""

    def __init__(self, component: str, stage: int, step: int, value: float):
        super().__init__(f"{component} = {value} at stage {stage}, step {step}")
        self.component = component
        self.stage = stage
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    lr: float = 1e-3
    window: int = 64
    batch: int = 32
    epochs: int = 150
    steps_per_epoch: int | None = None  # None: about one pass over the sequence
    beta: float = 0.02
    lambda_hmm: float = 1.0
    redecode_every: int = 500
    hmm_epochs: int = 20
    hmm_lr: float = 3e-4
    hmm_chunk: int = 1000
    hmm_batch: int = 0  # chunks per stage-1 step; 0 = all (one full-batch step per epoch)
    warm_start: bool = True
    warm_start_random: int = 8
    emission_fit_steps: int = 400
    n_latent: int | None = None
    d_theta: int = 8
    soft_gamma: bool = False
    alternate: bool = False
    standardize: bool = True
    clip_norm: float | None = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    metrics_every: int = 5
    seed: int = 0

    def validate(self, lag: int = 1) -> None:
        if self.window <= lag:
            raise ValueError(f"window {self.window} must exceed the lag {lag}")
        for name in ("lr", "beta", "lambda_hmm", "hmm_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch", "redecode_every", "hmm_chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hmm_batch < 0:
            raise ValueError("hmm_batch must be non-negative")
        if self.epochs < 0 or self.hmm_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> TrainConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class TrainReport:
    hmm_nll: list[float] = field(default_factory=list)  # stage 1, per step, one per epoch
    losses: list[dict] = field(default_factory=list)  # stage 2, per epoch
    snapshots: list[dict] = field(default_factory=list)
    warm_start: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Models:
    hmm: Arhmm
    vae: Vae
    prior: PriorFlow

    @classmethod
    def for_data(cls, m: int, n_regimes: int, lag: int, cfg: TrainConfig) -> Models:
        n = cfg.n_latent or m
        return cls(Arhmm(m, n_regimes), Vae(m, n), PriorFlow(n, n_regimes, lag, cfg.d_theta))

    def to_meta(self) -> dict:
        return {"m": self.hmm.m, "n": self.vae.n, "n_regimes": self.hmm.n_regimes,
                "lag": self.prior.lag, "d_theta": self.prior.d_theta}

    @classmethod
    def from_meta(cls, meta: dict) -> Models:
        return cls(Arhmm(meta["m"], meta["n_regimes"]), Vae(meta["m"], meta["n"]),
                   PriorFlow(meta["n"], meta["n_regimes"], meta["lag"], meta["d_theta"]))


@dataclass
class TrainResult:
    models: Models
    params: dict[str, np.ndarray]
    config: TrainConfig
    report: TrainReport
    x_mean: np.ndarray
    x_std: np.ndarray
    c_hat: np.ndarray

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Posterior means of the latents for raw observations."""
        from .vae import encode
        return encode(self.models.vae, self.params, self.standardize(x))[0]

    def decode_regimes(self, x: np.ndarray) -> np.ndarray:
        return hmm_mod.viterbi(self.models.hmm, self.params, self.standardize(x))


# ---------------------------------------------------------------------------
# losses


def _history(z: Node, lag: int, width: int) -> Node:
    """Flattened most-recent-first history for the last ``width`` steps of (B, lag+width, n)."""
    parts = [z[:, lag - 1 - j: lag - 1 - j + width] for j in range(lag)]
    return parts[0] if lag == 1 else ops.concat(parts, axis=-1)


def total_loss(models: Models, P: dict[str, Node], windows: np.ndarray, c_hat: np.ndarray,
               u: np.ndarray, beta: float, lambda_hmm: float,
               gamma: np.ndarray | None = None) -> tuple[Node, dict[str, Node]]:
    """Joint objective on a batch of windows.

    ``windows`` is (B, L+W, m) where the first L rows only provide history,
    ``c_hat`` (B, L+W) labels, ``u`` (B, L+W, n) standard-normal draws and
    ``gamma`` optional (B, L+W, C) soft labels that replace ``c_hat``.
    Returns the total and its parts ``hmm``, ``recon``, ``kld``.
    """
    vae, flow, hmm = models.vae, models.prior, models.hmm
    L, n = flow.lag, vae.n
    B, S, _ = windows.shape
    W = S - L
    mean, log_var = vae.encode(P, windows)
    z = reparameterize(mean, log_var, u)
    recon = recon_loss(vae.decode(P, z), windows)

    log_q = ops.gaussian_log_density(z, mean, log_var).sum()
    z_t = z[:, L:].reshape(B * W, n)
    hist = _history(z, L, W).reshape(B * W, n * L)
    if gamma is None:
        log_p = flow.log_prob(P, z_t, hist, c_hat[:, L:].reshape(-1)).sum()
    else:
        log_p = flow.log_prob_soft(P, z_t, hist, gamma[:, L:].reshape(B * W, -1)).sum()
    log_p = log_p + ops.gaussian_log_density(z[:, :L], 0.0, 0.0).sum()
    kld = (log_q - log_p) / (B * S)

    parts = {"recon": recon, "kld": kld}
    total = recon + beta * kld
    if lambda_hmm > 0:
        parts["hmm"] = hmm_mod.window_hmm_loss(hmm, P, windows[:, L - 1:]) / (B * W)
        total = total + lambda_hmm * parts["hmm"]
    return total, parts


def _check(parts: dict[str, float], stage: int, step: int) -> None:
    for name, value in parts.items():
        if not np.isfinite(value) or abs(value) > DIVERGENCE:
            raise TrainingDiverged(name, stage, step, value)


# ---------------------------------------------------------------------------
# stage 1


def _fit_emissions(models: Models, params: dict, x: np.ndarray, gamma: np.ndarray, steps: int,
                   lr: float, rng: np.random.Generator, batch: int = 1024) -> None:
    """Responsibility-weighted maximum likelihood for the emission MLPs."""
    opt = Adam(lr=lr)
    names = [k for k in params if k.startswith("hmm.e.")]
    for _ in range(steps):
        idx = rng.integers(0, len(x) - 1, batch)
        tape = Tape()
        P = tape.params({k: params[k] for k in names})
        lp = models.hmm.ar_log_emissions({**P, "hmm.logA": tape.const(params["hmm.logA"])},
                                         x[idx], x[idx + 1])
        loss = -(lp * gamma[idx]).sum(axis=-1).mean()
        opt.step(params, tape.grads_by_name(loss, P))


def full_hmm_nll(models: Models, params: dict, x: np.ndarray) -> float:
    """Exact negative log-likelihood of the whole sequence per step."""
    tape = Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items() if k.startswith("hmm.")}
    return float(hmm_mod.hmm_loss(models.hmm, P, x).value) / len(x)


def train_hmm(models: Models, params: dict, x: np.ndarray, cfg: TrainConfig,
              rng: np.random.Generator, report: TrainReport) -> None:
    C = models.hmm.n_regimes
    if cfg.warm_start and C > 1:
        fit = hmm_mod.linear_warm_start(x, C, rng.integers(2 ** 31), cfg.warm_start_random)
        params["hmm.logA"] = fit.log_A.copy()
        _fit_emissions(models, params, x, fit.gamma, cfg.emission_fit_steps, EMISSION_FIT_LR, rng)
        report.warm_start = {"start": fit.start, "log_likelihood": fit.log_likelihood}
        log.info("warm start %s, linear log-likelihood %.1f", fit.start, fit.log_likelihood)
    names = [k for k in params if k.startswith("hmm.")]
    opt = Adam(lr=cfg.hmm_lr, beta1=cfg.beta1, beta2=cfg.beta2, clip_norm=cfg.clip_norm)
    chunk = min(cfg.hmm_chunk, len(x) - 1)
    for epoch in range(cfg.hmm_epochs):
        off = int(rng.integers(chunk)) if len(x) > 2 * chunk else 0
        starts = np.arange(off, len(x) - chunk, chunk)
        rng.shuffle(starts)
        per_step = cfg.hmm_batch or max(len(starts), 1)
        for i in range(0, max(len(starts), 1), per_step):
            sel = starts[i:i + per_step]
            windows = x[sel[:, None] + np.arange(chunk + 1)] if sel.size else x[None, :]
            tape = Tape()
            P = tape.params({k: params[k] for k in names})
            loss = hmm_mod.window_hmm_loss(models.hmm, P, windows) / (windows.shape[0] * (windows.shape[1] - 1))
            _check({"hmm": float(loss.value)}, 1, epoch)
            opt.step(params, tape.grads_by_name(loss, P))
        report.hmm_nll.append(full_hmm_nll(models, params, x))
        log.info("stage 1 epoch %d nll %.4f", epoch, report.hmm_nll[-1])


# ---------------------------------------------------------------------------
# stage 2


def _snapshot(result_params: dict, models: Models, x: np.ndarray, ds: Dataset, c_hat: np.ndarray) -> dict:
    from .vae import encode
    out = {}
    if ds.z is not None:
        z_est = encode(models.vae, result_params, x)[0]
        out["mcc"] = metrics.mcc(ds.z, z_est).mcc
    C = models.hmm.n_regimes
    if C <= metrics.MAX_EXHAUSTIVE_REGIMES:
        rep = metrics.regime_report(ds.c, c_hat, ds.A, hmm_mod.transition_matrix(result_params))
        out["accuracy"] = rep.accuracy
        out["A_mse"] = rep.A_mse
    return out


def _smoothed(models: Models, params: dict, x: np.ndarray) -> np.ndarray:
    return hmm_mod.forward_backward(models.hmm, params, x).gamma


def train(ds: Dataset, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Run both stages. Deterministic given ``cfg.seed``."""
    lag = ds.lag
    cfg.validate(lag)
    t0 = time.perf_counter()
    x_raw = np.asarray(ds.x, dtype=np.float64)
    if cfg.standardize:
        x_mean, x_std = x_raw.mean(axis=0), x_raw.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
    else:
        x_mean, x_std = np.zeros(x_raw.shape[1]), np.ones(x_raw.shape[1])
    x = (x_raw - x_mean) / x_std
    T, m = x.shape
    C = ds.n_regimes
    S = cfg.window + lag
    if T < S + 1:
        raise ValueError(f"sequence of {T} steps is shorter than one window ({S + 1})")

    init_ss, hmm_ss, data_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    models = Models.for_data(m, C, lag, cfg)
    init_rng = np.random.default_rng(init_ss)
    params = {**models.hmm.init(init_rng), **models.vae.init(init_rng), **models.prior.init(init_rng)}
    report = TrainReport()

    train_hmm(models, params, x, cfg, np.random.default_rng(hmm_ss), report)

    rng = np.random.default_rng(data_ss)
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, clip_norm=cfg.clip_norm)
    decay = PlateauDecay(cfg.plateau_factor, cfg.plateau_patience, min_lr=cfg.min_lr)
    hmm_names = {k for k in params if k.startswith("hmm.")}
    steps = cfg.steps_per_epoch or max(1, T // (cfg.window * cfg.batch))
    lam = cfg.lambda_hmm
    c_hat = hmm_mod.viterbi(models.hmm, params, x)
    gamma_full = _smoothed(models, params, x) if cfg.soft_gamma else None
    step = 0
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        for _ in range(steps):
            if step and step % cfg.redecode_every == 0:
                c_hat = hmm_mod.viterbi(models.hmm, params, x)
                if cfg.soft_gamma:
                    gamma_full = _smoothed(models, params, x)
            start = rng.integers(0, T - S + 1, cfg.batch)
            idx = start[:, None] + np.arange(S)
            u = rng.standard_normal((cfg.batch, S, models.vae.n))
            tape = Tape()
            if cfg.alternate:
                train_hmm_now = step % 2 == 0
                P = {k: (tape.param(v) if (k in hmm_names) == train_hmm_now else tape.const(v))
                     for k, v in params.items()}
            else:
                P = tape.params(params)
            gamma = None if gamma_full is None else gamma_full[idx]
            loss, parts = total_loss(models, P, x[idx], c_hat[idx], u, cfg.beta, lam, gamma)
            values = {k: float(v.value) for k, v in parts.items()}
            values["total"] = float(loss.value)
            _check(values, 2, step)
            grads = tape.grads_by_name(loss, {k: v for k, v in P.items() if v.trainable})
            opt.step(params, grads)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        row = {"epoch": epoch, "step": step, "lr": opt.lr, **{k: v / steps for k, v in sums.items()}}
        report.losses.append(row)
        decay.update(opt, row["total"])
        if cfg.metrics_every and ((epoch + 1) % cfg.metrics_every == 0 or epoch == cfg.epochs - 1):
            snap = {"epoch": epoch, "step": step, **_snapshot(params, models, x, ds, c_hat)}
            report.snapshots.append(snap)
            log.info("epoch %d %s", epoch, snap)

    c_hat = hmm_mod.viterbi(models.hmm, params, x)
    report.wall_clock = time.perf_counter() - t0
    result = TrainResult(models, params, cfg, report, x_mean, x_std, c_hat)
    if out_dir is not None:
        save_run(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# persistence


def save_run(result: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {**result.params, "data.x_mean": result.x_mean, "data.x_std": result.x_std}
    meta = {"models": result.models.to_meta(), "config": result.config.to_json()}
    checkpoint.save(out / "model.ckpt", arrays, meta)
    (out / "train_report.json").write_text(json.dumps(result.report.to_json(), indent=2))
    write_csv(out / "loss.csv", _loss_rows(result.report))
    write_csv(out / "metrics.csv", result.report.snapshots)
    return out


def _loss_rows(report: TrainReport) -> list[dict]:
    rows = [{"stage": 1, "epoch": i, "hmm": v} for i, v in enumerate(report.hmm_nll)]
    rows += [{"stage": 2, **r} for r in report.losses]
    return rows


def write_csv(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def load_run(out_dir) -> TrainResult:
    arrays, meta = checkpoint.load(Path(out_dir) / "model.ckpt")
    x_mean = arrays.pop("data.x_mean")
    x_std = arrays.pop("data.x_std")
    report_path = Path(out_dir) / "train_report.json"
    report = TrainReport(**json.loads(report_path.read_text())) if report_path.exists() else TrainReport()
    return TrainResult(Models.from_meta(meta["models"]), arrays, TrainConfig.from_json(meta["config"]),
                       report, x_mean, x_std, np.empty(0, dtype=np.int64))
