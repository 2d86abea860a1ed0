"""Command-line entry point: ``bpinn-ip <command> <config> [options]``.

Exit status is 0 on success, 1 for invalid input (configuration, shapes,
unsupported operators) and 2 for runtime failures (missing or corrupt
files, diverging training).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io as bio
from .config import ConfigError, ExperimentConfig, config_load
from .datagen import RNG_ALGORITHM, make_dataset
from .fields import LinearityError, ShapeError, field_shape
from .linear_bayes import GaussParams, posterior_eq5
from .training import TrainingError, train
from .uq import mc_dropout_infer, mse, psnr, ssim

log = logging.getLogger("bpinn_ip")

LOG_ENV = "BPINN_LOG_LEVEL"


def _json_value(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def _write_json(path: Path, doc: dict) -> None:
    doc = {k: _json_value(v) for k, v in doc.items()}
    bio.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(cfg: ExperimentConfig) -> dict:
    A = cfg.operator()
    return {
        "scene": cfg.raw["scene"],
        "operator": A.describe(),
        "input_shape": list(A.input_shape),
        "output_shape": list(A.output_shape),
        "v_eps": cfg.v_eps,
        "v_f": cfg.v_f,
        "seed": cfg.data_seed,
        "splits": {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test},
        "supervised": cfg.v_f is not None,
        "rng": RNG_ALGORITHM,
    }


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    A = cfg.operator()
    splits = make_dataset(cfg.scene, A, cfg.n_train, cfg.n_val, cfg.n_test, cfg.v_eps, cfg.v_f, cfg.data_seed)
    for ds in splits:
        bio.save_dataset(cfg.data_dir, ds)
    bio.write_manifest(cfg.data_dir, _manifest(cfg))
    print(f"wrote {cfg.n_train}/{cfg.n_val}/{cfg.n_test} samples to {cfg.data_dir}")
    return 0


def _load_splits(cfg: ExperimentConfig, supervised: bool):
    man = bio.read_manifest(cfg.data_dir)
    A = cfg.operator()
    if man["operator"] != A.describe() or man["input_shape"] != list(A.input_shape):
        raise ConfigError("dataset manifest does not match the configured operator; rerun gen-data")
    if supervised and not man["supervised"]:
        raise ConfigError("supervised training needs a dataset generated with variances.v_f")
    out = {}
    for split, n in man["splits"].items():
        out[split] = bio.load_split(cfg.data_dir, split, n, supervised, A, man["v_eps"], man["v_f"], man["seed"])
    return A, out


def cmd_train(cfg: ExperimentConfig, args) -> int:
    A, splits = _load_splits(cfg, cfg.train.supervised)
    params, logbook = train(splits["train"], splits["val"], cfg.arch, A, cfg.train)
    bio.save_checkpoint(cfg.checkpoint, params)
    bio.atomic_write_text(cfg.log_csv, logbook.to_csv())
    print(f"trained {len(logbook.rows)} epochs (best {logbook.best_epoch}); "
          f"checkpoint {cfg.checkpoint}, log {cfg.log_csv}")
    return 0


def _read_input(path, expected, what):
    f = bio.field_read(path).astype(np.float64)
    if field_shape(f) != expected:
        raise ShapeError(f"{what} {path} has shape (w, h) = {field_shape(f)}, expected {expected}")
    return f


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    params = bio.load_checkpoint(cfg.checkpoint)
    A = cfg.operator()
    g = _read_input(args.input, tuple(params.arch.input_shape), "input")
    T = args.samples if args.samples is not None else cfg.samples
    rate = args.rate if args.rate is not None else params.arch.dropout_rate
    seed = args.seed if args.seed is not None else cfg.infer_seed
    res = mc_dropout_infer(params, g, T, rate, seed, A)
    out = Path(args.out) if args.out else cfg.output_dir
    bio.field_write(out / "mean.bpif", res.mean)
    bio.field_write(out / "std.bpif", res.std)
    bio.pgm_write(out / "mean.pgm", res.mean)
    bio.pgm_write(out / "std.pgm", res.std)
    summary = {"T": T, "rate": rate, "seed": seed, "consistency": res.consistency}
    if args.ref:
        ref = _read_input(args.ref, tuple(params.arch.output_shape), "reference")
        summary.update(psnr=psnr(res.mean, ref), ssim=ssim(res.mean, ref), mse=mse(res.mean, ref))
    _write_json(out / "uq.json", summary)
    print(json.dumps({k: _json_value(v) for k, v in summary.items()}, sort_keys=True))
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    pred = bio.field_read(args.pred).astype(np.float64)
    ref = bio.field_read(args.ref).astype(np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from reference shape {ref.shape}")
    metrics = {"mse": mse(pred, ref), "psnr": psnr(pred, ref, args.data_range)}
    if min(ref.shape) >= 8:
        metrics["ssim"] = ssim(pred, ref, args.data_range)
    if args.out:
        _write_json(Path(args.out), metrics)
    print(json.dumps({k: _json_value(v) for k, v in metrics.items()}, sort_keys=True))
    return 0


def cmd_solve_analytic(cfg: ExperimentConfig, args) -> int:
    if cfg.v_f is None:
        raise ConfigError("solve-analytic needs variances.v_f (Tikhonov prior variance)")
    A = cfg.operator()
    g = _read_input(args.input, A.output_shape, "input")
    p = GaussParams(cfg.v_eps, cfg.v_f, f_bar=cfg.scene.background)
    post = posterior_eq5(A, g, p, n_probe=cfg.n_probe, seed=cfg.infer_seed)
    out = Path(args.out) if args.out else cfg.output_dir
    bio.field_write(out / "analytic_mean.bpif", post.mean)
    bio.field_write(out / "analytic_var.bpif", post.var_diag)
    bio.pgm_write(out / "analytic_mean.pgm", post.mean)
    summary = {"solver_residual": post.solver_residual, "lambda": cfg.v_eps / cfg.v_f}
    _write_json(out / "analytic.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "solve-analytic": cmd_solve_analytic,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bpinn-ip", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate synthetic datasets").add_argument("config")
    sub.add_parser("train", help="train the network").add_argument("config")

    p = sub.add_parser("infer", help="MC-dropout inference with uncertainty maps")
    p.add_argument("config")
    p.add_argument("--input", required=True, help="observed field (BPIF)")
    p.add_argument("--samples", type=int, help="number of Monte Carlo passes T")
    p.add_argument("--rate", type=float, help="dropout rate (default: the checkpoint's)")
    p.add_argument("--seed", type=int)
    p.add_argument("--ref", help="reference field for PSNR/SSIM")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="PSNR/SSIM/MSE between two fields")
    p.add_argument("config")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--data-range", type=float)
    p.add_argument("--out", help="write metrics JSON here")

    p = sub.add_parser("solve-analytic", help="closed-form Tikhonov posterior")
    p.add_argument("config")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output directory")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        cfg = config_load(args.config)
        return COMMANDS[args.command](cfg, args)
    except bio.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError, LinearityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
