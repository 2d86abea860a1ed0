"""Closed-form linear-Gaussian posteriors, solved matrix-free.

With ``g = A f + eps``, ``eps ~ N(0, v_eps I)`` and Gaussian priors, the
posterior of ``f`` is Gaussian with mean given by a Tikhonov-type normal
equation and covariance ``v_eps * M^{-1}``.  Means are found with conjugate
gradients; only the diagonal of the covariance is ever estimated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fields import ForwardOperator, LinearityError, ShapeError, op_adjoint_linear, op_apply

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
EXACT_VARIANCE_MAX_PIXELS = 64


class NumericalBreakdown(ArithmeticError):
    """Conjugate gradients produced a non-finite iterate."""


@dataclass
class GaussParams:
    """Noise and prior variances, plus the prior mean ``f_bar``.

    ``v_f`` is the variance of the reference (or Tikhonov prior) term and
    ``v_prior`` the variance of the background prior; both are optional and
    only checked by the solvers that need them.
    """

    v_eps: float
    v_f: float | None = None
    v_prior: float | None = None
    f_bar: np.ndarray | float = 0.0

    def __post_init__(self):
        for name in ("v_eps", "v_f", "v_prior"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and np.isfinite(v)):
                raise ValueError(f"{name} must be a finite positive number, got {v!r}")

    @property
    def lam(self) -> float:
        if self.v_f is None:
            raise ValueError("v_f is required for lambda = v_eps / v_f")
        return self.v_eps / self.v_f

    @property
    def mu(self) -> float:
        if self.v_prior is None:
            raise ValueError("v_prior is required for mu = v_eps / v_prior")
        return self.v_eps / self.v_prior


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    var_diag: np.ndarray
    solver_residual: float


def cg_solve(
    apply_normal: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Conjugate gradients for a symmetric positive-definite operator.

    Returns the solution and its relative residual ``||M x - b|| / ||b||``.
    If ``max_iter`` (default: ten times the number of unknowns) is reached
    first, the last iterate is returned with its residual.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(rhs, dtype=np.float64)
    if max_iter is None:
        max_iter = 10 * b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_normal(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    res = np.sqrt(rs) / bnorm
    it = 0
    while res > tol and it < max_iter:
        Mp = apply_normal(p)
        pMp = float(np.vdot(p, Mp))
        if not np.isfinite(pMp) or pMp <= 0.0:
            raise NumericalBreakdown(
                f"CG breakdown at iteration {it}: p'Mp = {pMp!r} (operator not SPD?)"
            )
        alpha = rs / pMp
        x += alpha * p
        r -= alpha * Mp
        rs_new = float(np.vdot(r, r))
        if not np.isfinite(rs_new):
            raise NumericalBreakdown(f"CG residual became non-finite at iteration {it}")
        p = r + (rs_new / rs) * p
        rs = rs_new
        res = np.sqrt(rs) / bnorm
        it += 1

    # report the true residual, not the recursively updated one
    res = float(np.linalg.norm(apply_normal(x) - b) / bnorm)
    if res > tol:
        log.warning("CG stopped after %d iterations with relative residual %.3e", it, res)
    return x, res


def variance_diag(
    apply_normal: Callable[[np.ndarray], np.ndarray],
    shape: tuple[int, ...],
    scale: float,
    n_probe: int = 32,
    seed: int = 0,
    mode: str = "auto",
    tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """Estimate ``diag(scale * M^{-1})`` for an SPD operator ``M`` on fields of ``shape``.

    ``mode="exact"`` solves against every canonical basis field;
    ``mode="probe"`` uses ``n_probe`` Rademacher probes ``z`` and averages
    ``z * M^{-1} z``.  ``"auto"`` picks exact mode for fields with at most
    64 pixels.  Negative estimates are clamped to zero.
    """
    n = int(np.prod(shape))
    if mode == "auto":
        mode = "exact" if n <= EXACT_VARIANCE_MAX_PIXELS else "probe"
    if mode == "exact":
        diag = np.empty(n)
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            x, _ = cg_solve(apply_normal, e.reshape(shape), tol)
            diag[k] = x.ravel()[k]
    elif mode == "probe":
        if n_probe < 1:
            raise ValueError("n_probe must be >= 1")
        acc = np.zeros(n)
        for k in range(n_probe):
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
            z = rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
            x, _ = cg_solve(apply_normal, z.reshape(shape), tol)
            acc += z * x.ravel()
        diag = acc / n_probe
    else:
        raise ValueError(f"unknown variance mode {mode!r}")
    return np.maximum(scale * diag, 0.0).reshape(shape)


def _require_linear(A: ForwardOperator) -> None:
    if not A.is_linear:
        raise LinearityError("closed-form posteriors need a linear operator (identity emissivity)")


def _shape_of(A: ForwardOperator, which: str) -> tuple[int, int]:
    w, h = A.input_shape if which == "in" else A.output_shape
    return (h, w)


def _check(arr: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{what} has shape {arr.shape}, expected {shape}")
    return arr


def _solve_posterior(A, rhs, diag_shift, v_eps, tol, max_iter, n_probe, seed, variance):
    shape = _shape_of(A, "in")

    def normal(x):
        return op_adjoint_linear(A, op_apply(A, x)) + diag_shift * x

    mean, res = cg_solve(normal, rhs, tol, max_iter)
    if variance == "none":
        var = np.zeros(shape)
    else:
        var = variance_diag(normal, shape, v_eps, n_probe, seed, variance, tol)
    return GaussianPosterior(mean, var, res)


def posterior_eq5(
    A: ForwardOperator,
    g: np.ndarray,
    p: GaussParams,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    n_probe: int = 32,
    seed: int = 0,
    variance: str = "auto",
) -> GaussianPosterior:
    """Tikhonov posterior: ``(A'A + lam I) f = A'g + lam f_bar``, ``lam = v_eps/v_f``.

    ``variance`` is passed to :func:`variance_diag` as its mode, or ``"none"``
    to skip the covariance diagonal.
    """
    _require_linear(A)
    shape = _shape_of(A, "in")
    g = _check(g, _shape_of(A, "out"), "observation")
    lam = p.lam
    f_bar = np.broadcast_to(np.asarray(p.f_bar, dtype=np.float64), shape)
    rhs = op_adjoint_linear(A, g) + lam * f_bar
    return _solve_posterior(A, rhs, lam, p.v_eps, tol, max_iter, n_probe, seed, variance)


def posterior_eq17(
    A: ForwardOperator,
    g_T: np.ndarray,
    f_T: np.ndarray,
    p: GaussParams,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    n_probe: int = 32,
    seed: int = 0,
    variance: str = "auto",
) -> GaussianPosterior:
    """Posterior of a training image given its observation and a noisy reference.

    Solves ``(A'A + (lam + mu) I) f = A'g_T + lam f_T + mu f_bar`` with
    ``lam = v_eps/v_f`` and ``mu = v_eps/v_prior``.
    """
    _require_linear(A)
    shape = _shape_of(A, "in")
    g_T = _check(g_T, _shape_of(A, "out"), "observation")
    f_T = _check(f_T, shape, "reference")
    lam, mu = p.lam, p.mu
    f_bar = np.broadcast_to(np.asarray(p.f_bar, dtype=np.float64), shape)
    rhs = op_adjoint_linear(A, g_T) + lam * f_T + mu * f_bar
    return _solve_posterior(A, rhs, lam + mu, p.v_eps, tol, max_iter, n_probe, seed, variance)


__all__ = [
    "GaussParams",
    "GaussianPosterior",
    "NumericalBreakdown",
    "cg_solve",
    "posterior_eq17",
    "posterior_eq5",
    "variance_diag",
]
