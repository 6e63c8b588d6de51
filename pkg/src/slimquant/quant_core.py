"""Uniform affine group quantizer and sign binarizer.

All quantization in this package reduces to the per-row affine map

    code = clamp(round(w / scale) + zero, 0, 2^N - 1)
    w'   = (code - zero) * scale

with one (scale, zero) pair per output row inside an n x beta block.
Rounding is round-half-to-even everywhere, so results are platform-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

# Smallest usable row range. Rows whose extended range collapses to zero
# (all-zero rows) get this floor so the affine map stays well defined.
RANGE_FLOOR = 2.0 ** -20


def _max_code(bit_width: int) -> int:
    if not 1 <= bit_width <= 4:
        raise ValueError(f"bit width must be in [1, 4], got {bit_width}")
    return (1 << bit_width) - 1


@dataclass(frozen=True)
class GroupQuantParams:
    """Per-row affine parameters for one block.

    binary marks sign/magnitude blocks: codes {0,1} decode to scale*(2c - 1)
    instead of the affine map.
    """

    bit_width: int
    scale: np.ndarray  # (n,) float32, > 0
    zero: np.ndarray  # (n,) uint8, in [0, 2^N - 1]
    binary: bool = False

    def __post_init__(self) -> None:
        _max_code(self.bit_width)
        if self.scale.shape != self.zero.shape:
            raise ShapeMismatch(
                f"scale shape {self.scale.shape} != zero shape {self.zero.shape}"
            )


@dataclass(frozen=True)
class QuantizedBlock:
    codes: np.ndarray  # (n, width) uint8, in [0, 2^N - 1]
    params: GroupQuantParams


def _row_range(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (lo, hi) extended to include zero.

    Extending the range to cover 0 keeps the derived zero-point inside
    [0, 2^N - 1] (required for packing) and makes constant rows exactly
    representable at a grid endpoint.
    """
    b = np.asarray(block, dtype=np.float64)
    lo = np.minimum(b.min(axis=1), 0.0)
    hi = np.maximum(b.max(axis=1), 0.0)
    return lo, hi


def params_from_range(
    lo: np.ndarray, hi: np.ndarray, bit_width: int, gamma: float = 1.0
) -> GroupQuantParams:
    """Affine params for per-row ranges [lo, hi], optionally shrunk/grown by gamma."""
    maxq = _max_code(bit_width)
    span = (hi - lo) * gamma
    degenerate = span == 0.0
    span = np.where(degenerate, np.maximum(np.abs(hi), 1.0) * RANGE_FLOOR, span)
    scale = (span / maxq).astype(np.float32)
    # float32 underflow guard for subnormal spans
    scale = np.where(scale > 0.0, scale, np.float32(RANGE_FLOOR / maxq))
    zero = -np.rint(gamma * lo / scale.astype(np.float64))
    zero = np.where(degenerate, 0.0, zero)
    zero = np.clip(zero, 0, maxq).astype(np.uint8)
    return GroupQuantParams(bit_width=bit_width, scale=scale, zero=zero)


def derive_params(block: np.ndarray, bit_width: int) -> GroupQuantParams:
    lo, hi = _row_range(block)
    return params_from_range(lo, hi, bit_width)


def quantize_uniform(
    block: np.ndarray, bit_width: int, params: GroupQuantParams | None = None
) -> QuantizedBlock:
    """Quantize an n x beta block at bit_width bits, deriving per-row
    min/max params unless explicit ones are supplied."""
    b = np.asarray(block, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeMismatch(f"block must be 2-D, got shape {b.shape}")
    if params is None:
        params = derive_params(b, bit_width)
    elif params.bit_width != bit_width:
        raise ShapeMismatch(
            f"params are {params.bit_width}-bit, requested {bit_width}-bit"
        )
    maxq = _max_code(bit_width)
    scale = params.scale.astype(np.float64)[:, None]
    zero = params.zero.astype(np.float64)[:, None]
    codes = np.clip(np.rint(b / scale) + zero, 0, maxq).astype(np.uint8)
    return QuantizedBlock(codes=codes, params=params)


def dequantize(qb: QuantizedBlock) -> np.ndarray:
    """Decode a block back to float32."""
    codes = qb.codes.astype(np.float32)
    scale = qb.params.scale.astype(np.float32)[:, None]
    if qb.params.binary:
        return (codes * np.float32(2.0) - np.float32(1.0)) * scale
    zero = qb.params.zero.astype(np.float32)[:, None]
    return (codes - zero) * scale


def binarize(block: np.ndarray) -> tuple[np.ndarray, float]:
    """Sign decomposition: signs in {-1, +1} with sign(0) = +1, and the
    mean absolute value of the block as the shared magnitude."""
    b = np.asarray(block, dtype=np.float64)
    if b.size == 0:
        raise ShapeMismatch("cannot binarize an empty block")
    signs = np.where(b >= 0.0, 1.0, -1.0)
    alpha = float(np.abs(b).mean())
    return signs, alpha


def binarize_block(block: np.ndarray) -> QuantizedBlock:
    """1-bit sign/magnitude form of a block, packable like any other group."""
    signs, alpha = binarize(block)
    n = block.shape[0]
    codes = ((signs + 1.0) * 0.5).astype(np.uint8)
    params = GroupQuantParams(
        bit_width=1,
        scale=np.full(n, np.float32(alpha)),
        zero=np.zeros(n, dtype=np.uint8),
        binary=True,
    )
    return QuantizedBlock(codes=codes, params=params)


def block_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared element differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))
