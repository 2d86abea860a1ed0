"""A small numpy neural-network engine with hand-written backward rules.

Two architectures are supported:

* ``mlp``: fully connected layers on the flattened image, ReLU hidden units,
  linear output (no hidden sizes gives a single affine layer).
* ``conv_ed``: a compact convolutional encoder/decoder ("U-Net-lite").  The
  encoder has ``depth`` stride-2 3x3 convolutions doubling channels from
  ``base_channels``; the decoder upsamples (nearest neighbour), concatenates
  the encoder feature map of the same resolution and applies a 3x3
  convolution; a final 1x1 convolution gives one output channel.  When the
  output grid is an integer multiple of the input grid (super-resolution)
  the input is first upsampled by nearest neighbour.

Dropout (inverted) follows every hidden activation.  Arithmetic happens in
the dtype of the parameter vector: float32 normally, float64 for gradient
checks (``params.astype(np.float64)``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fields import ShapeError


class ContractError(ValueError):
    """A tape or gradient does not belong to the parameters it is used with."""


@dataclass(frozen=True)
class ArchSpec:
    kind: str = "conv_ed"
    input_shape: tuple[int, int] = (32, 32)
    output_shape: tuple[int, int] = (32, 32)
    hidden_sizes: tuple[int, ...] = (256, 256, 256)
    base_channels: int = 8
    depth: int = 2
    dropout_rate: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "output_shape", tuple(int(v) for v in self.output_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(v) for v in self.hidden_sizes))
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        errs = []
        if self.kind not in ("mlp", "conv_ed"):
            errs.append(f"arch.kind must be 'mlp' or 'conv_ed', got {self.kind!r}")
        if self.activation != "relu":
            errs.append("arch.activation must be 'relu'")
        if not 0.0 <= self.dropout_rate < 1.0:
            errs.append("arch.dropout_rate must lie in [0, 1)")
        if min(self.input_shape + self.output_shape) < 1:
            errs.append("arch shapes must be positive")
        if self.kind == "mlp" and any(h < 1 for h in self.hidden_sizes):
            errs.append("arch.hidden_sizes must be positive integers")
        if self.kind == "conv_ed":
            if self.depth < 1:
                errs.append("arch.depth must be >= 1")
            if self.base_channels < 1:
                errs.append("arch.base_channels must be >= 1")
            (wi, hi), (wo, ho) = self.input_shape, self.output_shape
            if wo % wi or ho % hi or wo // wi != ho // hi:
                errs.append("conv_ed output shape must be the same integer multiple of the input shape")
            if wo % 2**self.depth or ho % 2**self.depth:
                errs.append(f"conv_ed needs output dimensions divisible by 2**depth = {2**self.depth}")
        return errs

    @property
    def upsample(self) -> int:
        return self.output_shape[0] // self.input_shape[0]

    def canonical(self) -> str:
        """Stable text descriptor used in checkpoints."""
        d = {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
            "dropout_rate": self.dropout_rate,
            "activation": self.activation,
        }
        if self.kind == "mlp":
            d["hidden_sizes"] = list(self.hidden_sizes)
        else:
            d["base_channels"] = self.base_channels
            d["depth"] = self.depth
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_canonical(cls, text: str) -> "ArchSpec":
        d = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def _layer_shapes(arch: ArchSpec) -> list[tuple[str, tuple[int, ...], int, int]]:
    """``(name, shape, fan_in, fan_out)`` for every parameter tensor."""
    out = []
    if arch.kind == "mlp":
        sizes = [arch.input_shape[0] * arch.input_shape[1], *arch.hidden_sizes,
                 arch.output_shape[0] * arch.output_shape[1]]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"dense{i}.W", (a, b), a, b))
            out.append((f"dense{i}.b", (b,), a, b))
        return out

    ch = _conv_channels(arch)
    for l in range(1, arch.depth + 1):
        cin, cout = ch["enc_in"][l], ch["enc_out"][l]
        out.append((f"enc{l}.W", (cout, cin, 3, 3), cin * 9, cout * 9))
        out.append((f"enc{l}.b", (cout,), cin * 9, cout * 9))
    for l in range(arch.depth, 0, -1):
        cin, cout = ch["dec_in"][l], ch["dec_out"][l]
        out.append((f"dec{l}.W", (cout, cin, 3, 3), cin * 9, cout * 9))
        out.append((f"dec{l}.b", (cout,), cin * 9, cout * 9))
    c = ch["dec_out"][1]
    out.append(("out.W", (1, c, 1, 1), c, 1))
    out.append(("out.b", (1,), c, 1))
    return out


def _conv_channels(arch: ArchSpec) -> dict:
    b, d = arch.base_channels, arch.depth
    feat = {0: 1}
    enc_in, enc_out = {}, {}
    for l in range(1, d + 1):
        enc_in[l] = feat[l - 1]
        enc_out[l] = feat[l] = b * 2 ** (l - 1)
    dec_in, dec_out = {}, {}
    y = feat[d]
    for l in range(d, 0, -1):
        dec_in[l] = y + feat[l - 1]
        dec_out[l] = y = b * 2 ** (l - 2) if l >= 2 else b
    return {"enc_in": enc_in, "enc_out": enc_out, "dec_in": dec_in, "dec_out": dec_out}


@dataclass
class NetParams:
    """Flat parameter vector ``values`` with a named layout."""

    arch: ArchSpec
    values: np.ndarray
    layout: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layout:
            self.layout = build_layout(self.arch)
        total = sum(length for _, _, length, _ in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise ShapeError(f"parameter vector has {self.values.size} entries, arch needs {total}")

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def view(self, name: str, values: Optional[np.ndarray] = None) -> np.ndarray:
        vec = self.values if values is None else values
        for n, off, length, shape in self.layout:
            if n == name:
                return vec[off:off + length].reshape(shape)
        raise KeyError(name)

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.arch, self.values.astype(dtype), self.layout)

    def copy(self) -> "NetParams":
        return NetParams(self.arch, self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "NetParams":
        return NetParams(self.arch, values, self.layout)


def build_layout(arch: ArchSpec) -> list[tuple[str, int, int, tuple[int, ...]]]:
    layout, off = [], 0
    for name, shape, _, _ in _layer_shapes(arch):
        n = int(np.prod(shape))
        layout.append((name, off, n, shape))
        off += n
    return layout


def param_count(arch: ArchSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in _layer_shapes(arch))


def init_params(arch: ArchSpec, seed: int, dtype=np.float32) -> NetParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
    parts = []
    for name, shape, fan_in, fan_out in _layer_shapes(arch):
        if name.endswith(".b"):
            parts.append(np.zeros(int(np.prod(shape))))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-lim, lim, size=int(np.prod(shape))))
    return NetParams(arch, np.concatenate(parts).astype(dtype))


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropoutState:
    enabled: bool = False
    rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def active(self) -> bool:
        return self.enabled and self.rate > 0.0


class _Masker:
    def __init__(self, drop: DropoutState, dtype):
        self.drop = drop
        self.dtype = dtype
        self.rng = (
            np.random.Generator(np.random.Philox(np.random.SeedSequence([int(drop.rng_seed)])))
            if drop.active else None
        )

    def __call__(self, a: np.ndarray):
        if self.rng is None:
            return a, None
        keep = self.rng.random(a.shape) >= self.drop.rate
        mask = keep.astype(self.dtype) * self.dtype.type(1.0 / (1.0 - self.drop.rate))
        return a * mask, mask


# ---------------------------------------------------------------------------
# Convolution helpers (zero padding, NCHW)
# ---------------------------------------------------------------------------


def _conv_forward(x, W, b, stride, pad):
    cout, cin, k, _ = W.shape
    n = x.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    y = cols @ W.reshape(cout, -1).T + b
    y = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return y, (cols, x.shape, stride, pad, ho, wo)


def _conv_backward(dy, W, cache):
    cols, xshape, stride, pad, ho, wo = cache
    cout, cin, k, _ = W.shape
    n = xshape[0]
    dY = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dW = (dY.T @ cols).reshape(W.shape)
    db = dY.sum(axis=0)
    dcols = (dY @ W.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    hp, wp = xshape[2] + 2 * pad, xshape[3] + 2 * pad
    dxp = np.zeros((n, cin, hp, wp), dtype=dy.dtype)
    for a in range(k):
        for c in range(k):
            dxp[:, :, a:a + stride * (ho - 1) + 1:stride, c:c + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:hp - pad, pad:wp - pad] if pad else dxp
    return dx, dW, db


def _up(x, s):
    if s == 1:
        return x
    return np.repeat(np.repeat(x, s, axis=-2), s, axis=-1)


def _up_backward(d, s):
    if s == 1:
        return d
    sh = d.shape
    return d.reshape(sh[:-2] + (sh[-2] // s, s, sh[-1] // s, s)).sum(axis=(-3, -1))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ActivationTape:
    arch: ArchSpec
    n_params: int
    batched: bool
    out_shape: tuple[int, ...]
    caches: dict


def forward(params: NetParams, g: np.ndarray, drop: DropoutState = DropoutState()):
    """Run the network on one field ``(h, w)`` or a batch ``(n, h, w)``.

    Returns ``(f_nn, tape)``; the tape holds what :func:`backward` needs.
    """
    arch = params.arch
    dt = params.values.dtype
    x = np.asarray(g, dtype=dt)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    wi, hi = arch.input_shape
    if x.ndim != 3 or x.shape[1:] != (hi, wi):
        raise ShapeError(f"network input has shape {np.shape(g)}, expected (.., {hi}, {wi})")
    masker = _Masker(drop, dt)
    if arch.kind == "mlp":
        out, caches = _mlp_forward(params, x, masker)
    else:
        out, caches = _ed_forward(params, x, masker)
    wo, ho = arch.output_shape
    out = out.reshape(-1, ho, wo)
    if not batched:
        out = out[0]
    return out, ActivationTape(arch, params.size, batched, out.shape, caches)


def backward(params: NetParams, tape: ActivationTape, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: gradient of ``<f_nn, grad_out>`` w.r.t. the parameters."""
    if tape.arch != params.arch or tape.n_params != params.size:
        raise ContractError("activation tape was recorded with a different architecture")
    d = np.asarray(grad_out, dtype=params.values.dtype)
    if d.shape != tape.out_shape:
        raise ContractError(f"grad_out shape {d.shape} does not match tape output {tape.out_shape}")
    if not tape.batched:
        d = d[None]
    grad = np.zeros_like(params.values)
    if params.arch.kind == "mlp":
        _mlp_backward(params, tape.caches, d, grad)
    else:
        _ed_backward(params, tape.caches, d, grad)
    return grad


def _mlp_forward(params, x, masker):
    arch = params.arch
    h = x.reshape(x.shape[0], -1)
    n_layers = len(arch.hidden_sizes) + 1
    caches = {"inputs": [], "pre": [], "masks": []}
    for i in range(n_layers):
        W, b = params.view(f"dense{i}.W"), params.view(f"dense{i}.b")
        caches["inputs"].append(h)
        z = h @ W + b
        if i < n_layers - 1:
            caches["pre"].append(z)
            h, mask = masker(np.maximum(z, 0))
            caches["masks"].append(mask)
        else:
            h = z
    return h, caches


def _mlp_backward(params, caches, d, grad):
    arch = params.arch
    n_layers = len(arch.hidden_sizes) + 1
    d = d.reshape(d.shape[0], -1)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            mask = caches["masks"][i]
            if mask is not None:
                d = d * mask
            d = d * (caches["pre"][i] > 0)
        h = caches["inputs"][i]
        W = params.view(f"dense{i}.W")
        params.view(f"dense{i}.W", grad)[...] = h.T @ d
        params.view(f"dense{i}.b", grad)[...] = d.sum(axis=0)
        if i > 0:
            d = d @ W.T


def _ed_forward(params, x, masker):
    arch = params.arch
    caches = {}
    x = _up(x[:, None], arch.upsample)
    feats = {0: x}
    h = x
    for l in range(1, arch.depth + 1):
        z, caches[f"enc{l}"] = _conv_forward(h, params.view(f"enc{l}.W"), params.view(f"enc{l}.b"), 2, 1)
        h, mask = masker(np.maximum(z, 0))
        caches[f"enc{l}.act"] = (z, mask)
        feats[l] = h
    y = h
    for l in range(arch.depth, 0, -1):
        u = _up(y, 2)
        cat = np.concatenate([u, feats[l - 1]], axis=1)
        z, caches[f"dec{l}"] = _conv_forward(cat, params.view(f"dec{l}.W"), params.view(f"dec{l}.b"), 1, 1)
        y, mask = masker(np.maximum(z, 0))
        caches[f"dec{l}.act"] = (z, mask, u.shape[1])
    out, caches["out"] = _conv_forward(y, params.view("out.W"), params.view("out.b"), 1, 0)
    return out[:, 0], caches


def _act_backward(d, z, mask):
    if mask is not None:
        d = d * mask
    return d * (z > 0)


def _ed_backward(params, caches, d, grad):
    arch = params.arch
    d = d[:, None]
    dy, dW, db = _conv_backward(d, params.view("out.W"), caches["out"])
    params.view("out.W", grad)[...] = dW
    params.view("out.b", grad)[...] = db
    dfeat = {}
    for l in range(1, arch.depth + 1):
        z, mask, cu = caches[f"dec{l}.act"]
        dz = _act_backward(dy, z, mask)
        dcat, dW, db = _conv_backward(dz, params.view(f"dec{l}.W"), caches[f"dec{l}"])
        params.view(f"dec{l}.W", grad)[...] = dW
        params.view(f"dec{l}.b", grad)[...] = db
        dfeat[l - 1] = dcat[:, cu:]
        dy = _up_backward(dcat[:, :cu], 2)
    # dy is now the gradient flowing into the deepest encoder output
    dh = dy
    for l in range(arch.depth, 0, -1):
        z, mask = caches[f"enc{l}.act"]
        dz = _act_backward(dh, z, mask)
        dx, dW, db = _conv_backward(dz, params.view(f"enc{l}.W"), caches[f"enc{l}"])
        params.view(f"enc{l}.W", grad)[...] = dW
        params.view(f"enc{l}.b", grad)[...] = db
        if l > 1:
            dh = dx + dfeat[l - 1]
