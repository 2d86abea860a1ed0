"""Bayesian training loss, its gradient, Adam, and the training loop.

The negative log posterior of the network weights splits into

* ``j_nn``: misfit to the reference images, ``sum_i ||f_T - f_nn||^2 / (2 v_f)``
  (supervised only),
* ``j_pi``: physics misfit in data space, ``sum_i ||g_T - A f_nn||^2 / (2 v_eps)``,
* ``j_pr``: the prior, ``gamma_w * ||w||_beta^beta`` added once per mini-batch,
  plus an optional smoothness prior on the network outputs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional

import numpy as np

from .datagen import Dataset
from .fields import ForwardOperator, ShapeError, op_apply, op_vjp
from .neural import ArchSpec, DropoutState, NetParams, backward, forward, init_params
from .uq import psnr, ssim

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights and optimizer settings.

    ``img_gamma``/``img_beta`` switch on an extra prior on the network
    output, ``img_gamma * sum |grad f_nn|^img_beta`` over periodic forward
    differences; it is off by default.
    """

    mode: str = "supervised"
    v_eps: float = 0.01
    v_f: Optional[float] = 0.01
    gamma_w: float = 0.0
    beta_w: float = 2.0
    smooth_delta: float = 1e-6
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    dropout_rate: float = 0.1
    seed: int = 0
    early_stop_patience: int = 20
    img_gamma: float = 0.0
    img_beta: float = 2.0

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if self.mode not in ("supervised", "unsupervised"):
            errs.append(f"train.mode must be 'supervised' or 'unsupervised', got {self.mode!r}")
        if not self.v_eps > 0:
            errs.append("train.v_eps must be positive")
        if self.mode == "supervised" and (self.v_f is None or not self.v_f > 0):
            errs.append("supervised mode requires a positive v_f")
        if self.gamma_w < 0:
            errs.append("train.gamma_w must be non-negative")
        if not 0 < self.beta_w <= 2:
            errs.append("train.beta_w must lie in (0, 2]")
        if not self.smooth_delta > 0:
            errs.append("train.smooth_delta must be positive")
        if not self.learning_rate > 0:
            errs.append("train.learning_rate must be positive")
        if self.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        if self.max_epochs < 0:
            errs.append("train.max_epochs must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            errs.append("train.dropout_rate must lie in [0, 1)")
        if self.early_stop_patience < 1:
            errs.append("train.early_stop_patience must be >= 1")
        if self.img_gamma < 0:
            errs.append("train.img_gamma must be non-negative")
        if not 0 < self.img_beta <= 2:
            errs.append("train.img_beta must lie in (0, 2]")
        return errs

    @property
    def supervised(self) -> bool:
        return self.mode == "supervised"


@dataclass
class LossBreakdown:
    j_nn: float = 0.0
    j_pi: float = 0.0
    j_pr: float = 0.0
    total: float = 0.0

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.j_nn + other.j_nn,
            self.j_pi + other.j_pi,
            self.j_pr + other.j_pr,
            self.total + other.total,
        )


@dataclass
class Batch:
    """Observations ``g`` (n, h, w) and, in supervised mode, references ``f_T``."""

    g: np.ndarray
    f_T: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.g)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def loss_jnn(f_nn, f_T, v_f: float) -> float:
    f_nn, f_T = np.asarray(f_nn, np.float64), np.asarray(f_T, np.float64)
    if f_nn.shape != f_T.shape:
        raise ShapeError(f"f_nn {f_nn.shape} and f_T {f_T.shape} differ in shape")
    if not v_f > 0:
        raise ValueError("v_f must be positive")
    return float(np.sum((f_T - f_nn) ** 2) / (2.0 * v_f))


def loss_jpi(f_nn, g_T, A: ForwardOperator, v_eps: float) -> float:
    g_T = np.asarray(g_T, np.float64)
    pred = op_apply(A, np.asarray(f_nn, np.float64))
    if pred.shape != g_T.shape:
        raise ShapeError(f"predicted data {pred.shape} and g_T {g_T.shape} differ in shape")
    if not v_eps > 0:
        raise ValueError("v_eps must be positive")
    return float(np.sum((g_T - pred) ** 2) / (2.0 * v_eps))


def _smoothed_power(x, beta, delta):
    if beta == 2:
        return x * x
    return (x * x + delta * delta) ** (beta / 2.0)


def _smoothed_power_grad(x, beta, delta):
    if beta == 2:
        return 2.0 * x
    return beta * x * (x * x + delta * delta) ** (beta / 2.0 - 1.0)


def loss_jpr(w, gamma_w: float, beta_w: float, delta: float = 1e-6) -> float:
    """``gamma_w * sum_j (w_j^2 + delta^2)^(beta_w/2)``, exactly ``gamma_w*||w||^2`` at beta 2."""
    if gamma_w < 0 or not 0 < beta_w <= 2 or not delta > 0:
        raise ValueError("need gamma_w >= 0, beta_w in (0, 2] and delta > 0")
    if gamma_w == 0:
        return 0.0
    vals = w.values if isinstance(w, NetParams) else w
    vals = np.asarray(vals, np.float64)
    return float(gamma_w * np.sum(_smoothed_power(vals, beta_w, delta)))


def _img_prior(f, gamma, beta, delta):
    dx = np.roll(f, -1, axis=-1) - f
    dy = np.roll(f, -1, axis=-2) - f
    val = gamma * (np.sum(_smoothed_power(dx, beta, delta)) + np.sum(_smoothed_power(dy, beta, delta)))
    px = gamma * _smoothed_power_grad(dx, beta, delta)
    py = gamma * _smoothed_power_grad(dy, beta, delta)
    # adjoint of the periodic forward difference
    grad = (np.roll(px, 1, axis=-1) - px) + (np.roll(py, 1, axis=-2) - py)
    return float(val), grad


def _batch_terms(f_nn, batch: Batch, A: ForwardOperator, cfg: TrainConfig):
    """Per-batch data terms and their gradient w.r.t. the network outputs."""
    f64 = np.asarray(f_nn, np.float64)
    d_out = np.zeros_like(f64)
    j_nn = 0.0
    if cfg.supervised:
        if batch.f_T is None:
            raise TrainingError("supervised training needs reference images f_T")
        f_T = np.asarray(batch.f_T, np.float64)
        if f_T.shape != f64.shape:
            raise ShapeError(f"f_T {f_T.shape} does not match network output {f64.shape}")
        diff = f64 - f_T
        j_nn = float(np.sum(diff * diff) / (2.0 * cfg.v_f))
        d_out += diff / cfg.v_f
    g = np.asarray(batch.g, np.float64)
    resid = op_apply(A, f64) - g
    j_pi = float(np.sum(resid * resid) / (2.0 * cfg.v_eps))
    d_out += op_vjp(A, f64, resid) / cfg.v_eps
    j_img = 0.0
    if cfg.img_gamma > 0:
        j_img, d_img = _img_prior(f64, cfg.img_gamma, cfg.img_beta, cfg.smooth_delta)
        d_out += d_img
    return j_nn, j_pi, j_img, d_out


def loss_and_grad(
    batch: Batch,
    w: NetParams,
    A: ForwardOperator,
    cfg: TrainConfig,
    drop: DropoutState = DropoutState(),
    want_grad: bool = True,
):
    """Total mini-batch loss and (optionally) its gradient w.r.t. ``w.values``."""
    if len(batch) == 0:
        raise TrainingError("empty batch")
    f_nn, tape = forward(w, batch.g, drop)
    j_nn, j_pi, j_img, d_out = _batch_terms(f_nn, batch, A, cfg)
    j_w = loss_jpr(w.values, cfg.gamma_w, cfg.beta_w, cfg.smooth_delta)
    j_pr = j_w + j_img
    parts = LossBreakdown(j_nn, j_pi, j_pr, j_nn + j_pi + j_pr)
    if not want_grad:
        return parts, None
    grad = backward(w, tape, d_out.astype(w.dtype)).astype(np.float64)
    if cfg.gamma_w > 0:
        grad += cfg.gamma_w * _smoothed_power_grad(
            w.values.astype(np.float64), cfg.beta_w, cfg.smooth_delta
        )
    return parts, grad


def loss_total(batch, w, A, cfg, drop: DropoutState = DropoutState()) -> LossBreakdown:
    return loss_and_grad(batch, w, A, cfg, drop, want_grad=False)[0]


def grad_total(batch, w, A, cfg, drop: DropoutState = DropoutState()) -> np.ndarray:
    return loss_and_grad(batch, w, A, cfg, drop)[1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "AdamState":
        return cls(np.zeros(n, dtype), np.zeros(n, dtype), 0)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(w: NetParams, grad: np.ndarray, state: AdamState, lr: float, t: int):
    """One bias-corrected Adam update at step ``t >= 1``; returns ``(w, state)``."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if state.m.shape != w.values.shape or np.shape(grad) != w.values.shape:
        raise ShapeError("Adam state, gradient and parameters differ in size")
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    step = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    new_values = (w.values.astype(np.float64) - step).astype(w.dtype)
    return w.with_values(new_values), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    j_nn: float
    j_pi: float
    j_pr: float
    total: float
    val_total: float
    val_psnr: float
    val_ssim: float
    wall_ms: float


CSV_COLUMNS = [f.name for f in dc_fields(EpochRow)]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in self.rows:
            wr.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rd = csv.DictReader(io.StringIO(text))
        if rd.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {rd.fieldnames}")
        rows = [
            EpochRow(int(d["epoch"]), *(float(d[c]) for c in CSV_COLUMNS[1:]))
            for d in rd
        ]
        return cls(rows)


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def _as_batch(ds: Dataset, idx, supervised: bool) -> Batch:
    return Batch(ds.g[idx], ds.f_T[idx] if supervised else None)


def evaluate(params: NetParams, ds: Dataset, A: ForwardOperator, cfg: TrainConfig):
    """Validation loss (dropout off) and mean PSNR/SSIM against the best reference.

    Metrics use the noiseless scenes when the dataset keeps them, otherwise
    the references; they are NaN when neither exists.
    """
    total = LossBreakdown()
    preds = []
    bs = max(cfg.batch_size, 32)
    for start in range(0, len(ds), bs):
        idx = np.arange(start, min(start + bs, len(ds)))
        batch = _as_batch(ds, idx, cfg.supervised)
        f_nn, _ = forward(params, batch.g)
        j_nn, j_pi, j_img, _ = _batch_terms(f_nn, batch, A, cfg)
        total = total + LossBreakdown(j_nn, j_pi, j_img, j_nn + j_pi + j_img)
        preds.append(np.asarray(f_nn, np.float64))
    j_w = loss_jpr(params.values, cfg.gamma_w, cfg.beta_w, cfg.smooth_delta)
    total = total + LossBreakdown(0.0, 0.0, j_w, j_w)
    ref = ds.truth if ds.truth is not None else ds.f_T
    if ref is None or not preds:
        return total, math.nan, math.nan
    pred = np.concatenate(preds)
    ps = [psnr(p, r) for p, r in zip(pred, ref)]
    ss = [ssim(p, r) if min(r.shape) >= 8 else math.nan for p, r in zip(pred, ref)]
    return total, float(np.mean(ps)), float(np.mean(ss))


def train(
    train_set: Dataset,
    val_set: Dataset,
    arch: ArchSpec,
    A: ForwardOperator,
    cfg: TrainConfig,
    init: NetParams | None = None,
):
    """Mini-batch Adam on the Bayesian loss; returns the best-validation weights and the log."""
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if cfg.supervised and train_set.f_T is None:
        raise TrainingError("supervised mode requires a labelled training set")
    params = init if init is not None else init_params(arch, cfg.seed)
    logbook = TrainLog()
    if cfg.max_epochs == 0:
        return params, logbook

    state = AdamState.zeros(params.size)
    best, best_val, since_best = params.copy(), math.inf, 0
    n = len(train_set)
    step = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([cfg.seed, 101, epoch]))
        ).permutation(n)
        epoch_loss = LossBreakdown()
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            batch = _as_batch(train_set, idx, cfg.supervised)
            drop = DropoutState(cfg.dropout_rate > 0, cfg.dropout_rate, _derived_seed(cfg.seed, 202, epoch, b))
            parts, grad = loss_and_grad(batch, params, A, cfg, drop)
            if not (math.isfinite(parts.total) and np.all(np.isfinite(grad))):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}: {parts}; "
                    "try a smaller learning rate or larger variances"
                )
            step += 1
            params, state = adam_step(params, grad, state, cfg.learning_rate, step)
            epoch_loss = epoch_loss + parts

        if len(val_set):
            val, vpsnr, vssim = evaluate(params, val_set, A, cfg)
        else:
            val, vpsnr, vssim = epoch_loss, math.nan, math.nan
        wall = (time.perf_counter() - t0) * 1e3
        logbook.rows.append(
            EpochRow(epoch, epoch_loss.j_nn, epoch_loss.j_pi, epoch_loss.j_pr, epoch_loss.total,
                     val.total, vpsnr, vssim, wall)
        )
        log.info("epoch %d: train %.4g val %.4g psnr %.2f", epoch, epoch_loss.total, val.total, vpsnr)
        if val.total < best_val:
            best, best_val, since_best = params.copy(), val.total, 0
            logbook.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, logbook.best_epoch)
                break
    return best, logbook


__all__ = [
    "AdamState",
    "Batch",
    "CSV_COLUMNS",
    "EpochRow",
    "LossBreakdown",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "adam_step",
    "evaluate",
    "grad_total",
    "loss_and_grad",
    "loss_jnn",
    "loss_jpi",
    "loss_jpr",
    "loss_total",
    "train",
]
