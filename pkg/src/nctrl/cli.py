"""Command-line interface: ``nctrl {gen,train,eval,decode,check,export-plots}``.

Exit codes: 0 success, 2 usage, 3 generation or training failure, 4 missing
or unreadable inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from contextlib import nullcontext
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, metrics, theory
from .arhmm import ArhmmError, transition_matrix
from .autodiff.checkpoint import CheckpointError
from .datagen import (PRESETS, DatasetError, GenConfig, GenerationError, MixingSpec,
                      generate, read_dataset, write_dataset)
from .prior import PriorFlowError
from .trainer import TrainConfig, TrainingDiverged, load_run, train, write_csv

EXIT_OK, EXIT_USAGE, EXIT_FAILURE, EXIT_MISSING = 0, 2, 3, 4
MANIFEST = "manifest.json"

log = logging.getLogger("nctrl")


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest


def _timestamp() -> str:
    """UTC now, or SOURCE_DATE_EPOCH when set (reproducible outputs)."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat()


def write_manifest(out: Path, subcommand: str, config: dict, seeds: dict,
                   inputs: dict, argv: list[str]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"subcommand": subcommand, "config": config, "seeds": seeds,
                "inputs": {k: str(v) for k, v in inputs.items()}, "output": str(out),
                "argv": argv, "version": __version__, "started": _timestamp()}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _finish_manifest(out: Path) -> None:
    path = out / MANIFEST
    manifest = json.loads(path.read_text())
    manifest["finished"] = _timestamp()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _require_dir(path: Path, what: str, marker: str) -> Path:
    if not (path / marker).exists():
        raise MissingInput(f"{what} {path} has no {marker}")
    return path


def _load_dataset(path: Path):
    _require_dir(path, "dataset", "meta.json")
    return read_dataset(path)


def _load_run(path: Path):
    _require_dir(path, "run", "model.ckpt")
    return load_run(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, argv) -> None:
    cfg = GenConfig()
    if args.preset:
        cfg = replace(cfg, mixing=MixingSpec.parse(PRESETS[args.preset]["mixing"]))
    overrides = {"n": args.n, "n_regimes": args.c, "T": args.t, "lag": args.lag,
                 "transition": args.transition, "seed": args.seed}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.mixing:
        cfg = replace(cfg, mixing=MixingSpec.parse(args.mixing))
    if cfg.n < 1 or cfg.n_regimes < 1 or cfg.T < 2 or cfg.lag < 1:
        raise UsageError("--n, --c and --lag must be positive and --t at least 2")
    if cfg.n_regimes == 1:
        warnings.warn("with a single regime the sufficient-variability condition cannot hold; "
                      "latents are not identifiable", stacklevel=1)
    out = Path(args.out)
    write_manifest(out, "gen", cfg.to_meta(), {"seed": cfg.seed}, {}, argv)
    write_dataset(generate(cfg), out)
    _finish_manifest(out)


def cmd_train(args, argv) -> None:
    cfg = TrainConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config {path} not found")
        cfg = TrainConfig.load(path)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    data = Path(args.data)
    ds = _load_dataset(data)
    out = Path(args.out)
    write_manifest(out, "train", cfg.to_json(), {"seed": cfg.seed}, {"data": data}, argv)
    train(ds, cfg, out)
    _finish_manifest(out)


def evaluate(ds, run, mode: str = "spearman") -> tuple[dict, np.ndarray, np.ndarray, metrics.MccReport]:
    z_est = run.encode(ds.x)
    c_hat = run.decode_regimes(ds.x)
    report: dict = {"T": int(ds.T)}
    rep = None
    if ds.z is not None:
        rep = metrics.mcc(ds.z, z_est, mode)
        report.update(mcc=rep.mcc, mcc_mode=mode,
                      mcc_pearson=metrics.mcc(ds.z, z_est, "pearson").mcc,
                      per_component=rep.matched().tolist(), assignment=rep.assignment.tolist(),
                      warning=rep.warning, constant_columns=rep.constant_columns)
    C = ds.n_regimes
    A_est = transition_matrix(run.params)
    if C <= metrics.MAX_EXHAUSTIVE_REGIMES:
        regimes = metrics.regime_report(ds.c, c_hat, ds.A, A_est)
        report.update(accuracy=regimes.accuracy, a_mse=regimes.A_mse,
                      permutation=regimes.permutation.tolist())
    report["A_est"] = A_est.tolist()
    return report, z_est, c_hat, rep


def cmd_eval(args, argv) -> None:
    data, run_dir = Path(args.data), Path(args.run)
    ds = _load_dataset(data)
    run = _load_run(run_dir)
    out = Path(args.out) if args.out else run_dir / "eval"
    write_manifest(out, "eval", {"mode": args.mode}, {}, {"data": data, "run": run_dir}, argv)
    report, z_est, c_hat, rep = evaluate(ds, run, args.mode)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    (out / "c_hat.u32").write_bytes(c_hat.astype("<u4").tobytes())
    if rep is not None:
        with open(out / "scatter.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "factor_true", "factor_est", "component", "assignment"])
            for i, j in enumerate(rep.assignment):
                for t in range(ds.T):
                    w.writerow([t, repr(float(ds.z[t, i])), repr(float(z_est[t, j])), i, int(j)])
    _finish_manifest(out)


def cmd_decode(args, argv) -> None:
    data, run_dir = Path(args.data), Path(args.run)
    ds = _load_dataset(data)
    run = _load_run(run_dir)
    out = Path(args.out) if args.out else run_dir / "decode"
    write_manifest(out, "decode", {}, {}, {"data": data, "run": run_dir}, argv)
    c_hat = run.decode_regimes(ds.x)
    (out / "c_hat.u32").write_bytes(c_hat.astype("<u4").tobytes())
    _finish_manifest(out)


def cmd_check(args, argv) -> None:
    data = Path(args.data)
    ds = _load_dataset(data)
    out = Path(args.out) if args.out else data.parent / f"{data.name}.check-{args.kind}"
    config = {"kind": args.kind, "points": args.points, "tolerance": args.tol}
    write_manifest(out, "check", config, {"seed": args.seed}, {"data": data}, argv)
    if args.kind == "volume":
        if ds.mixing is None:
            raise MissingInput(f"{data} carries no mixing function")
        rep = theory.check_volume(ds.mixing, args.points, args.seed, points=ds.z)
        result = {"kind": "volume", **rep.to_json(args.tol)}
    else:
        if ds.dynamics is None or ds.z is None:
            raise MissingInput(f"{data} carries no ground-truth dynamics")
        reports = [theory.variability_vectors(ds.dynamics, z_t, z_hist)
                   for z_t, z_hist in theory.variability_points(ds.z, args.points, args.seed)]
        passed = [r.passed for r in reports]
        result = {"kind": "variability", "points": len(reports),
                  "pass_fraction": float(np.mean(passed)), "pass": any(passed),
                  "reports": [r.to_json() for r in reports]}
    (out / "check.json").write_text(json.dumps(result, indent=2))
    _finish_manifest(out)
    log.info("check %s pass=%s", args.kind, result["pass"])


def cmd_export_plots(args, argv) -> None:
    data, eval_dir = Path(args.data), Path(args.eval)
    ds = _load_dataset(data)
    _require_dir(eval_dir, "eval output", "report.json")
    _require_dir(eval_dir, "eval output", "c_hat.u32")
    manifest = json.loads((_require_dir(eval_dir, "eval output", MANIFEST) / MANIFEST).read_text())
    run_dir = Path(manifest["inputs"]["run"])
    _require_dir(run_dir, "run", "loss.csv")
    out = Path(args.out) if args.out else eval_dir / "plots"
    write_manifest(out, "export-plots", {}, {}, {"data": data, "eval": eval_dir, "run": run_dir}, argv)
    c_hat = np.frombuffer((eval_dir / "c_hat.u32").read_bytes(), dtype="<u4").astype(np.int64)
    if len(c_hat) != ds.T:
        raise MissingInput(f"{eval_dir}/c_hat.u32 does not match the dataset length")
    write_csv(out / "regimes.csv", [{"t": t, "c_true": int(ds.c[t]), "c_hat": int(c_hat[t])}
                                    for t in range(ds.T)])
    (out / "loss.csv").write_text((run_dir / "loss.csv").read_text())
    scatter = eval_dir / "scatter.csv"
    if scatter.exists():
        with open(scatter, newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_component: dict[str, list[dict]] = {}
        for r in rows:
            by_component.setdefault(r["component"], []).append(r)
        for comp, comp_rows in by_component.items():
            write_csv(out / f"scatter_{comp}.csv", comp_rows)
    _finish_manifest(out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nctrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--n", type=int)
    g.add_argument("--c", type=int)
    g.add_argument("--t", type=int)
    g.add_argument("--lag", type=int)
    g.add_argument("--mixing", help="orthogonal or mlp:<layers>")
    g.add_argument("--transition", choices=["mlp", "linear"])
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file mirroring TrainConfig")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override the stage-2 epoch count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trained run against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--run", required=True)
    e.add_argument("--out")
    e.add_argument("--mode", choices=["spearman", "pearson"], default="spearman")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="Viterbi regime labels for a dataset")
    d.add_argument("--data", required=True)
    d.add_argument("--run", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("check", help="numerical checks of the identifiability assumptions")
    c.add_argument("--data", required=True)
    c.add_argument("--kind", choices=["variability", "volume"], required=True)
    c.add_argument("--points", type=int, default=16)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-6, help="volume tolerance on |log|det J||")
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)

    x = sub.add_parser("export-plots", help="CSV bundle for scatter, loss and regime plots")
    x.add_argument("--data", required=True)
    x.add_argument("--eval", required=True, help="output directory of `eval`")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_plots)
    return p


def _thread_limit():
    value = os.environ.get("NCTRL_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    started = time.perf_counter()
    try:
        with _thread_limit():
            args.func(args, argv)
    except (MissingInput, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"nctrl {args.command}: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, ValueError) as exc:
        print(f"nctrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, TrainingDiverged, PriorFlowError, ArhmmError,
            theory.TheoryCheckError) as exc:
        print(f"nctrl {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    log.info("%s done in %.1fs", args.command, time.perf_counter() - started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
