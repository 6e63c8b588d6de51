"""Flat binary tensor files.

Layout, all little-endian:

    magic   4 bytes  b"SLMT"
    version u16      currently 1
    ndim    u8
    pad     u8       reserved, written as zero
    extent  u64 * ndim
    payload f32 * prod(extent), row-major

NaN and infinity are rejected on both read and write. A size mismatch
between header and payload is an error in either direction; short files
are never silently truncated.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    EmptyCalibration,
    IoFailure,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedVersion,
)

MAGIC = b"SLMT"
VERSION = 1
_HEADER = struct.Struct("<4sHBB")


def tensor_to_bytes(values: np.ndarray, name: str = "<bytes>") -> bytes:
    """Serialize a tensor to the container format, casting to float32."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"refusing to serialize non-finite values for {name}")
    header = _HEADER.pack(MAGIC, VERSION, arr.ndim, 0)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if np.little_endian:
        payload = arr.tobytes(order="C")
    else:
        payload = arr.byteswap().tobytes(order="C")
    return header + extents + payload


def write_tensor(path: str, values: np.ndarray) -> None:
    """Write a float32 tensor. Non-float32 input is cast before writing."""
    blob = tensor_to_bytes(values, name=str(path))
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_tensor(path: str) -> np.ndarray:
    """Read a tensor written by write_tensor. Returns float32, row-major."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return tensor_from_bytes(raw, name=path)


def tensor_from_bytes(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{name}: {len(raw)} bytes is shorter than the header")
    magic, version, ndim, _pad = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagic(f"{name}: expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"{name}: version {version}, this build reads {VERSION}")
    extent_end = _HEADER.size + 8 * ndim
    if len(raw) < extent_end:
        raise TruncatedPayload(f"{name}: header declares {ndim} dims but extents are cut off")
    shape = struct.unpack_from(f"<{ndim}Q", raw, _HEADER.size)
    count = math.prod(shape)
    expected = extent_end + 4 * count
    if len(raw) != expected:
        raise TruncatedPayload(
            f"{name}: header implies {expected} bytes total, file has {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=extent_end)
    arr = flat.reshape(shape).astype(np.float32, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name}: payload contains NaN or infinity")
    return arr


@dataclass
class CalibrationSet:
    """Activation samples for one layer: each sample is t x m token rows."""

    samples: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        for s in self.samples:
            if s.ndim != 2:
                raise ShapeMismatch(f"calibration sample must be 2-D, got shape {s.shape}")
        widths = {s.shape[1] for s in self.samples}
        if len(widths) > 1:
            raise ShapeMismatch(f"calibration samples disagree on channel count: {sorted(widths)}")

    @property
    def channels(self) -> int:
        if not self.samples:
            raise EmptyCalibration("calibration set has no samples")
        return self.samples[0].shape[1]

    @property
    def token_count(self) -> int:
        return sum(s.shape[0] for s in self.samples)

    def stacked(self) -> np.ndarray:
        """All token rows as one (token_count, channels) float32 matrix."""
        if not self.samples:
            raise EmptyCalibration("calibration set has no samples")
        return np.concatenate([np.asarray(s, dtype=np.float32) for s in self.samples], axis=0)


def load_calibration(path: str) -> CalibrationSet:
    """Load calibration activations from a tensor file.

    A 2-D tensor is one sample; a 3-D tensor of shape (s, t, m) is s samples.
    """
    arr = read_tensor(path)
    if arr.ndim == 2:
        return CalibrationSet([arr])
    if arr.ndim == 3:
        return CalibrationSet([arr[i] for i in range(arr.shape[0])])
    raise ShapeMismatch(f"{path}: calibration tensor must be 2-D or 3-D, got {arr.ndim}-D")
