"""MC-dropout inference with uncertainty maps, and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fields import ForwardOperator, ShapeError, op_apply
from .neural import ContractError, DropoutState, NetParams, forward

DEFAULT_SAMPLES = 50
SSIM_WINDOW = 8


@dataclass
class UqResult:
    mean: np.ndarray
    var_diag: Optional[np.ndarray]
    n_samples: int
    consistency: Optional[float] = None

    @property
    def std(self) -> Optional[np.ndarray]:
        return None if self.var_diag is None else np.sqrt(self.var_diag)


def sample_seed(seed: int, t: int) -> int:
    """Dropout seed of the ``t``-th Monte Carlo pass; independent of ``T``."""
    return int(np.random.SeedSequence([int(seed), int(t)]).generate_state(1, np.uint64)[0])


def mc_dropout_infer(
    params: NetParams,
    g: np.ndarray,
    T: int = DEFAULT_SAMPLES,
    rate: float = 0.1,
    seed: int = 0,
    A: ForwardOperator | None = None,
    with_variance: bool = True,
) -> UqResult:
    """Posterior mean and pixelwise variance from ``T`` stochastic forward passes.

    The variance uses the unbiased ``1/(T-1)`` divisor.  With ``A`` given,
    ``consistency`` is ``||g - mean_t A f_t||^2``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if with_variance and T < 2:
        raise ContractError("a variance map needs T >= 2 samples")
    samples = []
    for t in range(T):
        f_t, _ = forward(params, g, DropoutState(True, rate, sample_seed(seed, t)))
        samples.append(np.asarray(f_t, dtype=np.float64))
    stack = np.stack(samples)
    mean = stack.sum(axis=0) / T
    var = None
    if with_variance:
        dev = stack - mean
        var = (dev * dev).sum(axis=0) / (T - 1)
    consistency = None
    if A is not None:
        g_hat = sum(op_apply(A, f_t) for f_t in samples) / T
        consistency = float(np.sum((np.asarray(g, dtype=np.float64) - g_hat) ** 2))
    return UqResult(mean, var, T, consistency)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"fields have different shapes {a.shape} and {b.shape}")
    return a, b


def mse(f_hat, f_ref) -> float:
    a, b = _pair(f_hat, f_ref)
    return float(np.mean((a - b) ** 2))


def psnr(f_hat, f_ref, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for a perfect match.

    ``data_range`` defaults to ``max - min`` of the reference.
    """
    a, b = _pair(f_hat, f_ref)
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def ssim(f_hat, f_ref, data_range: float | None = None, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``win x win`` windows (stride 1, uniform weights)."""
    a, b = _pair(f_hat, f_ref)
    if a.ndim != 2:
        raise ShapeError("ssim works on single 2-D fields")
    if min(a.shape) < win:
        raise ShapeError(f"fields of shape {a.shape} are smaller than the {win}x{win} window")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


__all__ = ["UqResult", "mc_dropout_infer", "mse", "psnr", "sample_seed", "ssim"]
