"""Synthetic infrared scenes and their simulated observations.

True temperature maps are a background level plus isotropic Gaussian hot
spots.  Observations go through a :class:`~bpinn_ip.fields.ForwardOperator`
and get white Gaussian noise; supervised datasets also carry noisy
reference images.

Randomness comes from numpy's counter-based Philox generator.  Every
sample owns sub-streams keyed by ``(seed, split, index, purpose)`` so
samples are reproducible independently of how many others are drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .fields import ForwardOperator, ShapeError, field_shape, op_apply

RNG_ALGORITHM = "numpy.Philox4x64-10/SeedSequence"

SPLITS = {"train": 0, "val": 1, "test": 2}
_SCENE, _OBS, _REF = 0, 1, 2


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox generator for the key path ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *keys])))


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    n_blobs: tuple[int, int] = (2, 5)
    blob_amplitude: tuple[float, float] = (0.5, 1.0)
    blob_sigma: tuple[float, float] = (1.5, 4.0)
    background: float = 0.0

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if self.width < 1 or self.height < 1:
            errs.append("scene width and height must be positive")
        for name in ("n_blobs", "blob_amplitude", "blob_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                errs.append(f"scene.{name} range is empty ({lo} > {hi})")
        if self.n_blobs[0] < 0:
            errs.append("scene.n_blobs must be non-negative")
        if self.blob_amplitude[0] < 0:
            errs.append("scene.blob_amplitude must be non-negative")
        if self.blob_sigma[0] <= 0:
            errs.append("scene.blob_sigma must be positive")
        return errs


def blob_field(shape, centers, amplitudes, sigmas, background=0.0) -> np.ndarray:
    """Sum of isotropic Gaussian bumps on a constant background, clamped at 0.

    ``shape`` is ``(height, width)``; ``centers`` are ``(row, col)`` pairs.
    """
    h, w = shape
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    f = np.full((h, w), float(background))
    for (cy, cx), amp, sig in zip(centers, amplitudes, sigmas):
        f += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sig * sig))
    return np.maximum(f, 0.0)


def sample_true_field(spec: SceneSpec, rng_seed) -> np.ndarray:
    """Random blob scene. ``rng_seed`` is an int or a ``numpy`` Generator."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else substream(rng_seed)
    n = int(rng.integers(spec.n_blobs[0], spec.n_blobs[1] + 1))
    centers = np.column_stack(
        [rng.uniform(0, spec.height, size=n), rng.uniform(0, spec.width, size=n)]
    )
    amps = rng.uniform(*spec.blob_amplitude, size=n)
    sigmas = rng.uniform(*spec.blob_sigma, size=n)
    return blob_field((spec.height, spec.width), centers, amps, sigmas, spec.background)


def gen_observation(f: np.ndarray, A: ForwardOperator, v_eps: float, rng_seed) -> np.ndarray:
    if v_eps < 0:
        raise ValueError("v_eps must be non-negative")
    g = op_apply(A, f)
    if v_eps == 0:
        return g
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else substream(rng_seed)
    return g + np.sqrt(v_eps) * rng.standard_normal(g.shape)


def gen_reference(f: np.ndarray, v_f: float, rng_seed) -> np.ndarray:
    if v_f < 0:
        raise ValueError("v_f must be non-negative")
    if v_f == 0:
        return np.array(f, dtype=np.float64, copy=True)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else substream(rng_seed)
    return f + np.sqrt(v_f) * rng.standard_normal(np.shape(f))


@dataclass
class Dataset:
    """Stacked observations ``g`` (N, h, w) and optional references ``f_T``.

    ``truth`` keeps the noiseless scenes for evaluation only; training code
    never reads it.
    """

    g: np.ndarray
    f_T: Optional[np.ndarray]
    truth: Optional[np.ndarray]
    v_eps: float
    v_f: Optional[float]
    operator: ForwardOperator
    seed: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.g.ndim != 3 or field_shape(self.g) != self.operator.output_shape:
            raise ShapeError("observations do not match the operator's output shape")
        if self.f_T is not None and len(self.f_T) != len(self.g):
            raise ShapeError("reference count differs from observation count")

    def __len__(self) -> int:
        return len(self.g)

    @property
    def supervised(self) -> bool:
        return self.f_T is not None

    def without_labels(self) -> "Dataset":
        """The same observations with the references dropped (unsupervised use)."""
        return replace(self, f_T=None, v_f=None)

    def pairs(self):
        for i in range(len(self)):
            yield self.g[i], (None if self.f_T is None else self.f_T[i])


def _make_split(spec, A, n, v_eps, v_f, seed, split) -> Dataset:
    sid = SPLITS[split]
    hw_in = (A.input_shape[1], A.input_shape[0])
    hw_out = (A.output_shape[1], A.output_shape[0])
    truth = np.empty((n,) + hw_in)
    g = np.empty((n,) + hw_out)
    f_T = np.empty((n,) + hw_in) if v_f is not None else None
    for i in range(n):
        truth[i] = sample_true_field(spec, substream(seed, sid, i, _SCENE))
        g[i] = gen_observation(truth[i], A, v_eps, substream(seed, sid, i, _OBS))
        if f_T is not None:
            f_T[i] = gen_reference(truth[i], v_f, substream(seed, sid, i, _REF))
    return Dataset(g, f_T, truth, v_eps, v_f, A, seed, split, {"rng": RNG_ALGORITHM})


def make_dataset(
    spec: SceneSpec,
    A: ForwardOperator,
    n_train: int,
    n_val: int,
    n_test: int,
    v_eps: float,
    v_f: float | None,
    seed: int,
) -> tuple[Dataset, Dataset, Dataset]:
    """Train/validation/test splits, supervised iff ``v_f`` is given."""
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if A.input_shape != (spec.width, spec.height):
        raise ShapeError(
            f"operator input shape {A.input_shape} differs from scene shape "
            f"{(spec.width, spec.height)}"
        )
    return (
        _make_split(spec, A, n_train, v_eps, v_f, seed, "train"),
        _make_split(spec, A, n_val, v_eps, v_f, seed, "val"),
        _make_split(spec, A, n_test, v_eps, v_f, seed, "test"),
    )


__all__ = [
    "Dataset",
    "RNG_ALGORITHM",
    "SceneSpec",
    "blob_field",
    "gen_observation",
    "gen_reference",
    "make_dataset",
    "sample_true_field",
    "substream",
]
