"""On-disk formats: BPIF fields, BPNN checkpoints, PGM previews, datasets.

All multi-byte values are little-endian.  Writes go to a temporary file
in the target directory and are renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .fields import ForwardOperator
from .neural import ArchSpec, NetParams, build_layout, param_count

FIELD_MAGIC = b"BPIF"
CKPT_MAGIC = b"BPNN"
CKPT_VERSION = 1
MAX_DIM = 1 << 16


class FormatError(ValueError):
    """Malformed file: bad magic, truncation or inconsistent header."""


class CountMismatchError(FormatError):
    pass


class IntegrityError(FormatError):
    pass


class VersionError(FormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------


def field_to_bytes(f: np.ndarray) -> bytes:
    f = np.asarray(f)
    if f.ndim != 2:
        raise ValueError(f"a field must be 2-D, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("refusing to write a field with non-finite values")
    h, w = f.shape
    return FIELD_MAGIC + struct.pack("<II", w, h) + f.astype("<f4").tobytes()


def field_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 12 or data[:4] != FIELD_MAGIC:
        raise FormatError("not a BPIF field file (bad magic)")
    w, h = struct.unpack("<II", data[4:12])
    if w == 0 or h == 0 or w > MAX_DIM or h > MAX_DIM:
        raise FormatError(f"field dimensions {w}x{h} out of range")
    expected = 12 + 4 * w * h
    if len(data) != expected:
        raise FormatError(f"field file holds {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def field_write(path, f: np.ndarray) -> None:
    atomic_write_bytes(path, field_to_bytes(f))


def field_read(path) -> np.ndarray:
    return field_from_bytes(Path(path).read_bytes())


def pgm_bytes(f: np.ndarray) -> bytes:
    """8-bit binary PGM with min-max scaling; a constant field maps to all zeros."""
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape
    lo, hi = f.min(), f.max()
    if hi > lo:
        pix = np.clip(np.round((f - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    else:
        pix = np.zeros((h, w), dtype=np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def pgm_write(path, f: np.ndarray) -> None:
    atomic_write_bytes(path, pgm_bytes(f))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def params_to_bytes(params: NetParams) -> bytes:
    """Serialize parameters: magic, u16 version, arch text, u64 count, f32 values, CRC-32."""
    arch = params.arch.canonical().encode("utf-8")
    body = (
        CKPT_MAGIC
        + struct.pack("<H", CKPT_VERSION)
        + struct.pack("<I", len(arch))
        + arch
        + struct.pack("<Q", params.size)
        + params.values.astype("<f4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def params_from_bytes(data: bytes) -> NetParams:
    if len(data) < 6 or data[:4] != CKPT_MAGIC:
        raise FormatError("not a BPNN checkpoint (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    if len(data) < 10:
        raise CountMismatchError("checkpoint truncated inside the header")
    (alen,) = struct.unpack("<I", data[6:10])
    pos = 10 + alen
    if len(data) < pos + 8:
        raise CountMismatchError("checkpoint truncated inside the header")
    (count,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) != pos + 4 * count + 4:
        raise CountMismatchError(
            f"checkpoint has {len(data)} bytes, expected {pos + 4 * count + 4} for {count} parameters"
        )
    # checksum before parsing, so corruption anywhere is reported as such
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError("checkpoint checksum mismatch (file corrupted)")
    try:
        arch = ArchSpec.from_canonical(data[10:10 + alen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise FormatError(f"corrupt architecture descriptor: {exc}") from exc
    if count != param_count(arch):
        raise CountMismatchError(f"checkpoint holds {count} parameters, architecture needs {param_count(arch)}")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return NetParams(arch, values, build_layout(arch))


def save_checkpoint(path, params: NetParams) -> None:
    atomic_write_bytes(path, params_to_bytes(params))


def load_checkpoint(path) -> NetParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return params_from_bytes(path.read_bytes())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_dataset(root, ds: Dataset) -> None:
    d = Path(root) / ds.split
    for i in range(len(ds)):
        field_write(d / f"g_{i:05d}.bpif", ds.g[i])
        if ds.f_T is not None:
            field_write(d / f"fT_{i:05d}.bpif", ds.f_T[i])
        if ds.truth is not None:
            field_write(d / f"truth_{i:05d}.bpif", ds.truth[i])


def load_split(root, split: str, n: int, supervised: bool, operator: ForwardOperator,
               v_eps: float, v_f, seed: int) -> Dataset:
    d = Path(root) / split
    hw_in = (operator.input_shape[1], operator.input_shape[0])
    hw_out = (operator.output_shape[1], operator.output_shape[0])

    def stack(prefix, hw):
        if n == 0:
            return np.zeros((0,) + hw)
        return np.stack([field_read(d / f"{prefix}_{i:05d}.bpif") for i in range(n)]).astype(np.float64)

    g = stack("g", hw_out)
    f_T = stack("fT", hw_in) if supervised else None
    truth = stack("truth", hw_in) if (d / "truth_00000.bpif").exists() or n == 0 else None
    return Dataset(g, f_T, truth, v_eps, v_f, operator, seed, split)


def write_manifest(root, manifest: dict) -> None:
    atomic_write_text(Path(root) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path} (run gen-data first)")
    return json.loads(path.read_text())
