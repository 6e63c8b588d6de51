"""Quantizer range calibration by salience-split grid search.

For one block, a shrink/grow factor gamma is applied to every row's
min/max range before deriving scale and zero-point. The winning gamma
minimizes the sum of squared reconstruction errors, bookkept separately
over salient (masked) and ordinary elements. gamma = 1.0 is always a
candidate, so calibrated quantization can never lose to the plain
min/max quantizer on this objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .quant_core import (
    GroupQuantParams,
    QuantizedBlock,
    _row_range,
    dequantize,
    params_from_range,
    quantize_uniform,
)


@dataclass(frozen=True)
class SqcConfig:
    lambda_gamma: float = 0.1  # half-width of the gamma interval
    n_gamma: int = 50  # grid holds 2 * n_gamma points
    include_unity: bool = True
    per_row: bool = False  # opt-in: independent gamma per output row

    def __post_init__(self) -> None:
        if not 0.0 < self.lambda_gamma < 1.0:
            raise ValueError(f"lambda_gamma must be in (0, 1), got {self.lambda_gamma}")
        if self.n_gamma < 1:
            raise ValueError(f"n_gamma must be >= 1, got {self.n_gamma}")


def gamma_grid(cfg: SqcConfig) -> np.ndarray:
    """Candidate gammas: 2*n_gamma points spanning [1-lambda, 1+lambda]
    endpoints included, plus forced unity."""
    grid = np.linspace(1.0 - cfg.lambda_gamma, 1.0 + cfg.lambda_gamma, 2 * cfg.n_gamma)
    if cfg.include_unity:
        grid = np.unique(np.append(grid, 1.0))
    return grid


def split_loss(
    block: np.ndarray, deq: np.ndarray, mask: np.ndarray
) -> tuple[float, float]:
    """Squared reconstruction error split into (salient, ordinary) sums."""
    if mask.shape != block.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != block shape {block.shape}")
    err = (np.asarray(block, np.float64) - np.asarray(deq, np.float64)) ** 2
    masked = float(err[mask].sum())
    return masked, float(err.sum()) - masked


def calibrate_group(
    block: np.ndarray,
    bit_width: int,
    mask: np.ndarray,
    cfg: SqcConfig,
) -> tuple[QuantizedBlock, float | np.ndarray]:
    """Grid-search gamma for one block and quantize with the winner.

    Returns the quantized block and the winning gamma (an (n,) vector in
    per_row mode). Ties prefer the gamma closest to 1.0, then the smaller
    gamma. The loss of each candidate is measured on the float32
    dequantization actually deployed, so the winner's objective value is
    exactly the reconstruction error downstream consumers will see.
    """
    block = np.asarray(block, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != block.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != block shape {block.shape}")
    grid = gamma_grid(cfg)
    lo, hi = _row_range(block)

    row_losses = np.empty((len(grid), block.shape[0]), dtype=np.float64)
    for i, gamma in enumerate(grid):
        params = params_from_range(lo, hi, bit_width, gamma=float(gamma))
        deq = dequantize(quantize_uniform(block, bit_width, params)).astype(np.float64)
        err = (block - deq) ** 2
        row_losses[i] = err.sum(axis=1)

    # lexsort keys, last listed is primary: loss, then closeness to 1, then value
    tie_dist = np.abs(grid - 1.0)
    if cfg.per_row:
        winners = np.empty(block.shape[0], dtype=np.int64)
        for r in range(block.shape[0]):
            winners[r] = np.lexsort((grid, tie_dist, row_losses[:, r]))[0]
        gammas = grid[winners]
        params = _per_row_params(lo, hi, bit_width, gammas)
        return quantize_uniform(block, bit_width, params), gammas

    totals = row_losses.sum(axis=1)
    best = int(np.lexsort((grid, tie_dist, totals))[0])
    gamma_star = float(grid[best])
    params = params_from_range(lo, hi, bit_width, gamma=gamma_star)
    return quantize_uniform(block, bit_width, params), gamma_star


def _per_row_params(
    lo: np.ndarray, hi: np.ndarray, bit_width: int, gammas: np.ndarray
) -> GroupQuantParams:
    rows = [
        params_from_range(lo[r : r + 1], hi[r : r + 1], bit_width, gamma=float(gammas[r]))
        for r in range(len(gammas))
    ]
    return GroupQuantParams(
        bit_width=bit_width,
        scale=np.concatenate([p.scale for p in rows]),
        zero=np.concatenate([p.zero for p in rows]),
    )
