"""Experiment configuration: strict JSON with documented defaults."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .datagen import SceneSpec
from .fields import EmissivityMap, ForwardOperator, PsfKernel, restoration_operator, superres_operator
from .neural import ArchSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated rule."""

    def __init__(self, errors):
        self.errors = list(errors) if not isinstance(errors, str) else [errors]
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.errors))


DEFAULTS: dict[str, dict[str, Any]] = {
    "problem": {"kind": "restore", "factor": 2},
    "psf": {"sigma": 1.5, "size": 9},
    "emissivity": {"kind": "identity", "a": 1.0, "c": 1.0},
    "scene": {
        "width": 32,
        "height": 32,
        "n_blobs": [2, 5],
        "blob_amplitude": [0.5, 1.0],
        "blob_sigma": [1.5, 4.0],
        "background": 0.0,
    },
    "variances": {"v_eps": 0.008, "v_f": 0.001, "v_prior": None},
    "data": {"n_train": 128, "n_val": 32, "n_test": 32, "seed": 0},
    "train": {
        "mode": "supervised",
        "gamma_w": 1e-4,
        "beta_w": 2.0,
        "smooth_delta": 1e-6,
        "learning_rate": 3e-3,
        "batch_size": 16,
        "max_epochs": 100,
        "dropout_rate": 0.1,
        "seed": 0,
        "early_stop_patience": 20,
        "img_gamma": 0.0,
        "img_beta": 2.0,
    },
    "arch": {"kind": "conv_ed", "hidden_sizes": [256, 256, 256], "base_channels": 8, "depth": 2},
    "inference": {"samples": 50, "seed": 0, "n_probe": 32},
    "paths": {
        "data_dir": "data",
        "checkpoint": "model.bpnn",
        "log_csv": "train_log.csv",
        "output_dir": "out",
    },
}


@dataclass
class ExperimentConfig:
    problem: str
    sr_factor: int
    psf: PsfKernel
    emissivity: EmissivityMap
    scene: SceneSpec
    v_eps: float
    v_f: float | None
    v_prior: float | None
    n_train: int
    n_val: int
    n_test: int
    data_seed: int
    train: TrainConfig
    arch: ArchSpec
    samples: int
    infer_seed: int
    n_probe: int
    data_dir: Path
    checkpoint: Path
    log_csv: Path
    output_dir: Path
    raw: dict

    def operator(self) -> ForwardOperator:
        shape = (self.scene.width, self.scene.height)
        if self.problem == "superres":
            return superres_operator(shape, self.psf, self.sr_factor, self.emissivity)
        return restoration_operator(shape, self.psf, self.emissivity)


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key {k!r}")
        out[k] = v
    return out


def parse_json(text: str) -> dict:
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    return doc


def _merge(doc: dict, errors: list) -> dict:
    merged = copy.deepcopy(DEFAULTS)
    for section, value in doc.items():
        if section not in DEFAULTS:
            errors.append(f"unknown top-level key {section!r}")
            continue
        if not isinstance(value, dict):
            errors.append(f"{section} must be a JSON object")
            continue
        for key, v in value.items():
            if key not in DEFAULTS[section]:
                errors.append(f"unknown key {section}.{key}")
            else:
                merged[section][key] = v
    return merged


def _build(errors, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, TypeError) as exc:
        errors.extend(str(exc).split("; "))
        return None


def config_from_dict(doc: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    errors: list[str] = []
    m = _merge(doc, errors)
    base_dir = Path(base_dir)

    prob = m["problem"]
    kind = prob["kind"]
    if kind not in ("restore", "superres"):
        errors.append(f"problem.kind must be 'restore' or 'superres', got {kind!r}")
    factor = prob["factor"] if kind == "superres" else 1
    if not isinstance(factor, int) or factor < 1:
        errors.append("problem.factor must be a positive integer")
        factor = 1

    sc = m["scene"]
    scene = _build(
        errors, SceneSpec, sc["width"], sc["height"], tuple(sc["n_blobs"]),
        tuple(sc["blob_amplitude"]), tuple(sc["blob_sigma"]), sc["background"],
    )
    if scene is not None and (scene.width % factor or scene.height % factor):
        errors.append(
            f"super-resolution factor {factor} must divide the scene size {scene.width}x{scene.height}"
        )

    psf = _build(errors, PsfKernel.gaussian, m["psf"]["sigma"], m["psf"]["size"])
    if psf is not None and scene is not None:
        lo = min(scene.width, scene.height) // factor
        if psf.size > lo:
            errors.append(f"psf.size {psf.size} exceeds the observed field size {lo}")
    em = m["emissivity"]
    phi = _build(errors, EmissivityMap, em["kind"], em["a"], em["c"])

    var = m["variances"]
    v_eps, v_f, v_prior = var["v_eps"], var["v_f"], var["v_prior"]
    for name, v in (("v_eps", v_eps), ("v_f", v_f), ("v_prior", v_prior)):
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            errors.append(f"variances.{name} must be a positive number")
    if v_eps is None:
        errors.append("variances.v_eps is required")

    data = m["data"]
    for k in ("n_train", "n_val", "n_test"):
        if not isinstance(data[k], int) or data[k] < 0:
            errors.append(f"data.{k} must be a non-negative integer")

    tr = dict(m["train"])
    train = _build(errors, TrainConfig, v_eps=v_eps or 1.0, v_f=v_f, **tr)

    ar = m["arch"]
    arch = None
    if scene is not None:
        arch = _build(
            errors, ArchSpec, ar["kind"],
            (scene.width // factor, scene.height // factor), (scene.width, scene.height),
            tuple(ar["hidden_sizes"]), ar["base_channels"], ar["depth"], tr["dropout_rate"],
        )

    inf = m["inference"]
    if not isinstance(inf["samples"], int) or inf["samples"] < 2:
        errors.append("inference.samples must be an integer >= 2")
    if not isinstance(inf["n_probe"], int) or inf["n_probe"] < 1:
        errors.append("inference.n_probe must be a positive integer")

    paths = m["paths"]
    for k, v in paths.items():
        if not isinstance(v, str) or not v or "\x00" in v:
            errors.append(f"paths.{k} must be a non-empty path string")

    if errors:
        raise ConfigError(errors)

    def p(key):
        path = Path(paths[key])
        return path if path.is_absolute() else base_dir / path

    return ExperimentConfig(
        problem=kind, sr_factor=factor, psf=psf, emissivity=phi, scene=scene,
        v_eps=v_eps, v_f=v_f, v_prior=v_prior,
        n_train=data["n_train"], n_val=data["n_val"], n_test=data["n_test"], data_seed=data["seed"],
        train=train, arch=arch, samples=inf["samples"], infer_seed=inf["seed"], n_probe=inf["n_probe"],
        data_dir=p("data_dir"), checkpoint=p("checkpoint"), log_csv=p("log_csv"),
        output_dir=p("output_dir"), raw=m,
    )


def config_load(path) -> ExperimentConfig:
    """Read and validate a config file; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = parse_json(path.read_text())
    try:
        return config_from_dict(doc, path.parent)
    except (TypeError, AttributeError) as exc:
        raise ConfigError(f"malformed value in configuration: {exc}") from exc
