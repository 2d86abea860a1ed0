"""Real 2-D fields and the matrix-free physics operators.

A field is a 2-D ``numpy`` array of shape ``(height, width)`` stored
row-major. Every operator here also accepts a stack of fields with
leading batch axes, ``(..., height, width)``, which is what the training
loop feeds through.

The operators are the point spread function convolution ``H``, block
downsampling ``D`` and the pointwise emissivity map ``Phi``.  They are
composed into a :class:`ForwardOperator` in the fixed order
``Phi -> D -> H`` (the product ``H D Phi`` read right to left).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when field, kernel or operator shapes are incompatible."""


class LinearityError(ValueError):
    """Raised when a linear-only operation is given a nonlinear operator."""


def as_field(values, *, dtype=np.float64) -> np.ndarray:
    """Validate and return ``values`` as a finite field (or stack of fields)."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim < 2:
        raise ShapeError(f"a field needs at least 2 dimensions, got shape {arr.shape}")
    if arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise ShapeError(f"field dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite values")
    return arr


def field_shape(f: np.ndarray) -> tuple[int, int]:
    """Return ``(width, height)`` of a field."""
    return int(f.shape[-1]), int(f.shape[-2])


# ---------------------------------------------------------------------------
# PSF kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsfKernel:
    """A normalized odd-sized square convolution kernel.

    ``sigma`` records the width of the generating Gaussian when the kernel
    came from :meth:`gaussian`, and is ``None`` otherwise.
    """

    weights: np.ndarray
    sigma: float | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ShapeError(f"PSF must be a square odd-sized array, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("PSF weights must be finite")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"PSF weights must sum to 1 (got {w.sum()!r})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def gaussian(cls, sigma: float, size: int) -> "PsfKernel":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        if size < 1 or size % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        r = np.arange(size) - size // 2
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
        return cls(g / g.sum(), sigma=float(sigma))

    @classmethod
    def delta(cls, size: int = 1, shift: tuple[int, int] = (0, 0)) -> "PsfKernel":
        """Unit impulse, optionally displaced by ``(row, col)`` from the centre."""
        w = np.zeros((size, size))
        c = size // 2
        w[c + shift[0], c + shift[1]] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, size: int) -> "PsfKernel":
        return cls(np.full((size, size), 1.0 / size**2))

    def flipped(self) -> "PsfKernel":
        return PsfKernel(self.weights[::-1, ::-1].copy(), sigma=self.sigma)


def _check_kernel_fits(f: np.ndarray, h: PsfKernel) -> None:
    if h.size > min(f.shape[-2:]):
        raise ShapeError(
            f"kernel of size {h.size} is larger than field of shape {f.shape[-2:]}"
        )


def _circular_sum(f: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # out[i, j] = sum_{a,b} w[a, b] * f[i - (a - c), j - (b - c)]  (periodic)
    c = weights.shape[0] // 2
    out = np.zeros_like(f)
    for a in range(weights.shape[0]):
        for b in range(weights.shape[1]):
            wab = weights[a, b]
            if wab != 0.0:
                out += wab * np.roll(f, (a - c, b - c), axis=(-2, -1))
    return out


def conv_apply(f: np.ndarray, h: PsfKernel) -> np.ndarray:
    """Periodic 2-D convolution of ``f`` with the PSF ``h`` (direct summation)."""
    _check_kernel_fits(f, h)
    return _circular_sum(f, h.weights.astype(f.dtype, copy=False))


def conv_adjoint(g: np.ndarray, h: PsfKernel) -> np.ndarray:
    """Adjoint of :func:`conv_apply`: convolution with the 180-degree flipped kernel."""
    _check_kernel_fits(g, h)
    return _circular_sum(g, h.weights[::-1, ::-1].astype(g.dtype, copy=False))


# ---------------------------------------------------------------------------
# Block-average downsampling
# ---------------------------------------------------------------------------


def down_apply(f: np.ndarray, s: int) -> np.ndarray:
    """Average each ``s x s`` block into one pixel."""
    if s < 1:
        raise ValueError("downsampling factor must be >= 1")
    h, w = f.shape[-2:]
    if h % s or w % s:
        raise ShapeError(f"field shape {(h, w)} is not divisible by factor {s}")
    if s == 1:
        return f.copy()
    blocks = f.reshape(f.shape[:-2] + (h // s, s, w // s, s))
    return blocks.mean(axis=(-3, -1))


def down_adjoint(g: np.ndarray, s: int) -> np.ndarray:
    """Replicate each pixel into an ``s x s`` block scaled by ``1/s**2``."""
    if s < 1:
        raise ValueError("downsampling factor must be >= 1")
    if s == 1:
        return g.copy()
    up = np.repeat(np.repeat(g, s, axis=-2), s, axis=-1)
    return up / (s * s)


# ---------------------------------------------------------------------------
# Emissivity maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmissivityMap:
    """Pointwise monotone map from temperature to emitted radiance.

    ``kind`` is one of ``"identity"``, ``"scale"`` (``a*f``) or
    ``"smooth_saturate"`` (``a*f/sqrt(1 + f**2/c**2)``, saturating at ``a*c``).
    """

    kind: str = "identity"
    a: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "scale", "smooth_saturate"):
            raise ValueError(f"unknown emissivity kind {self.kind!r}")
        if self.kind == "scale" and not 0.0 < self.a <= 1.0:
            raise ValueError("scale emissivity needs a in (0, 1]")
        if self.kind == "smooth_saturate" and (self.a <= 0 or self.c <= 0):
            raise ValueError("smooth_saturate emissivity needs a > 0 and c > 0")

    @classmethod
    def identity(cls) -> "EmissivityMap":
        return cls("identity")

    @classmethod
    def scale(cls, a: float) -> "EmissivityMap":
        return cls("scale", a=a)

    @classmethod
    def smooth_saturate(cls, a: float, c: float) -> "EmissivityMap":
        return cls("smooth_saturate", a=a, c=c)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def describe(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        if self.kind == "scale":
            return {"kind": "scale", "a": self.a}
        return {"kind": "smooth_saturate", "a": self.a, "c": self.c}


def emiss_apply(f: np.ndarray, phi: EmissivityMap) -> np.ndarray:
    if phi.kind == "identity":
        return f.copy()
    if phi.kind == "scale":
        return phi.a * f
    return phi.a * f / np.sqrt(1.0 + (f / phi.c) ** 2)


def emiss_jacobian_diag(f: np.ndarray, phi: EmissivityMap) -> np.ndarray:
    """Pointwise derivative of the emissivity map, evaluated at ``f``."""
    if phi.kind == "identity":
        return np.ones_like(f)
    if phi.kind == "scale":
        return np.full_like(f, phi.a)
    return phi.a * (1.0 + (f / phi.c) ** 2) ** -1.5


# ---------------------------------------------------------------------------
# Composite forward operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    psf: PsfKernel


@dataclass(frozen=True)
class Down:
    factor: int


@dataclass(frozen=True)
class Emiss:
    phi: EmissivityMap


Stage = Union[Conv, Down, Emiss]

_STAGE_RANK = {Emiss: 0, Down: 1, Conv: 2}


@dataclass(frozen=True)
class ForwardOperator:
    """An ordered chain of stages mapping fields of ``input_shape`` (width, height).

    Stages are applied in list order and must respect the order
    emissivity, then downsampling, then convolution; each kind appears at
    most once.
    """

    stages: tuple
    input_shape: tuple[int, int]
    output_shape: tuple[int, int] = field(init=False)

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        ranks = [_STAGE_RANK[type(s)] for s in stages]
        if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
            raise ValueError("stages must be ordered Emiss -> Down -> Conv, each at most once")
        w, h = (int(v) for v in self.input_shape)
        if w < 1 or h < 1:
            raise ShapeError("input shape must be positive")
        object.__setattr__(self, "input_shape", (w, h))
        for st in stages:
            if isinstance(st, Down):
                if w % st.factor or h % st.factor:
                    raise ShapeError(
                        f"downsampling factor {st.factor} does not divide shape {(w, h)}"
                    )
                w, h = w // st.factor, h // st.factor
            elif isinstance(st, Conv) and st.psf.size > min(w, h):
                raise ShapeError(f"PSF of size {st.psf.size} exceeds field shape {(w, h)}")
        object.__setattr__(self, "output_shape", (w, h))

    @property
    def emissivity(self) -> EmissivityMap:
        for st in self.stages:
            if isinstance(st, Emiss):
                return st.phi
        return EmissivityMap.identity()

    @property
    def is_linear(self) -> bool:
        return self.emissivity.is_identity

    @property
    def n_in(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    @property
    def n_out(self) -> int:
        return self.output_shape[0] * self.output_shape[1]

    def describe(self) -> list[dict]:
        out = []
        for st in self.stages:
            if isinstance(st, Conv):
                d = {"stage": "conv", "size": st.psf.size}
                if st.psf.sigma is not None:
                    d["sigma"] = st.psf.sigma
                out.append(d)
            elif isinstance(st, Down):
                out.append({"stage": "down", "factor": st.factor})
            else:
                out.append({"stage": "emiss", **st.phi.describe()})
        return out

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return op_apply(self, f)


def restoration_operator(
    shape: tuple[int, int], psf: PsfKernel, phi: EmissivityMap | None = None
) -> ForwardOperator:
    """``g = H Phi f``."""
    return ForwardOperator((Emiss(phi or EmissivityMap.identity()), Conv(psf)), shape)


def superres_operator(
    shape: tuple[int, int], psf: PsfKernel, factor: int, phi: EmissivityMap | None = None
) -> ForwardOperator:
    """``g = H D Phi f`` with ``shape`` the high-resolution (width, height)."""
    return ForwardOperator(
        (Emiss(phi or EmissivityMap.identity()), Down(factor), Conv(psf)), shape
    )


def identity_operator(shape: tuple[int, int]) -> ForwardOperator:
    return ForwardOperator((), shape)


def _check_input(A: ForwardOperator, f: np.ndarray, expected: tuple[int, int], what: str):
    if field_shape(f) != expected:
        raise ShapeError(f"{what} has shape (w, h) = {field_shape(f)}, operator expects {expected}")


def _apply_linear_stages(A: ForwardOperator, x: np.ndarray) -> np.ndarray:
    for st in A.stages:
        if isinstance(st, Down):
            x = down_apply(x, st.factor)
        elif isinstance(st, Conv):
            x = conv_apply(x, st.psf)
    return x


def op_apply(A: ForwardOperator, f: np.ndarray) -> np.ndarray:
    _check_input(A, f, A.input_shape, "input field")
    x = f
    for st in A.stages:
        if isinstance(st, Emiss):
            x = emiss_apply(x, st.phi)
        elif isinstance(st, Down):
            x = down_apply(x, st.factor)
        else:
            x = conv_apply(x, st.psf)
    return x


def op_adjoint_linear(A: ForwardOperator, g: np.ndarray) -> np.ndarray:
    """Transpose of the operator; only defined when the emissivity is the identity."""
    if not A.is_linear:
        raise LinearityError(
            "op_adjoint_linear needs an identity emissivity; linearize the "
            "emissivity with emiss_jacobian_diag and use op_vjp instead"
        )
    return _linear_adjoint(A, g)


def _linear_adjoint(A: ForwardOperator, g: np.ndarray) -> np.ndarray:
    _check_input(A, g, A.output_shape, "data field")
    x = g
    for st in reversed(A.stages):
        if isinstance(st, Conv):
            x = conv_adjoint(x, st.psf)
        elif isinstance(st, Down):
            x = down_adjoint(x, st.factor)
    return x


def op_vjp(A: ForwardOperator, f: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product ``J_A(f)^T r``, valid for nonlinear emissivity too."""
    _check_input(A, f, A.input_shape, "input field")
    back = _linear_adjoint(A, r)
    if A.is_linear:
        return back
    return emiss_jacobian_diag(f, A.emissivity) * back


def dense_matrix(A: ForwardOperator) -> np.ndarray:
    """Build ``A`` explicitly, column by column, from canonical basis fields.

    Only meaningful for tiny fields and linear operators; used as a test oracle.
    """
    w, h = A.input_shape
    cols = []
    for k in range(w * h):
        e = np.zeros(w * h)
        e[k] = 1.0
        cols.append(op_apply(A, e.reshape(h, w)).ravel())
    return np.stack(cols, axis=1)


__all__ = [
    "Conv",
    "Down",
    "Emiss",
    "EmissivityMap",
    "ForwardOperator",
    "LinearityError",
    "PsfKernel",
    "ShapeError",
    "as_field",
    "conv_adjoint",
    "conv_apply",
    "dense_matrix",
    "down_adjoint",
    "down_apply",
    "emiss_apply",
    "emiss_jacobian_diag",
    "field_shape",
    "identity_operator",
    "op_adjoint_linear",
    "op_apply",
    "op_vjp",
    "restoration_operator",
    "superres_operator",
]
