"""Second-order weight salience from calibration activations.

The importance of weight element (i, j) is estimated as

    delta[i, j] = w[i, j]^2 / d[j]^2

where d is the diagonal of the inverse of the damped activation Gram
matrix H = mean over tokens of x xT. Channels that the calibration data
drives hard get small inverse diagonals and therefore large salience.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    BadGroupSize,
    EmptyCalibration,
    NotPositiveDefinite,
    ShapeMismatch,
)
from .tensor_store import CalibrationSet

DAMPING_FLOOR = 1e-8


@dataclass(frozen=True)
class HessianState:
    """Damped activation Gram matrix with its inverse diagonal and the
    upper-triangular factor U of the inverse: (H + damping*I)^-1 == UT U."""

    H: np.ndarray  # (m, m) float64, symmetric
    damping: float
    H_inv_diag: np.ndarray  # (m,) float64, > 0
    chol_inv: np.ndarray  # (m, m) float64, upper-triangular


@dataclass(frozen=True)
class SalienceMap:
    delta: np.ndarray  # (n, m) float64, >= 0
    group_mean: np.ndarray  # (k,) float64
    channel_mean: np.ndarray  # (m,) float64


def accumulate_hessian(calib: CalibrationSet) -> np.ndarray:
    """Mean outer product of all token vectors: (1/T) * sum_t x_t x_tT."""
    if not calib.samples or calib.token_count == 0:
        raise EmptyCalibration("need at least one token vector")
    m = calib.channels
    acc = np.zeros((m, m), dtype=np.float64)
    for s in calib.samples:
        x = np.asarray(s, dtype=np.float64)
        acc += x.T @ x
    return acc / float(calib.token_count)


def damp_and_invert(H: np.ndarray, percdamp: float = 0.01) -> HessianState:
    """Add proportional diagonal damping and invert via Cholesky."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeMismatch(f"Gram matrix must be square, got {H.shape}")
    H = (H + H.T) * 0.5
    damping = max(float(percdamp) * float(np.mean(np.diag(H))), DAMPING_FLOOR)
    A = H + damping * np.eye(H.shape[0])
    try:
        lower = scipy.linalg.cholesky(A, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(f"damped Gram matrix is not PD: {exc}") from exc
    inv = scipy.linalg.cho_solve((lower, True), np.eye(H.shape[0]))
    inv = (inv + inv.T) * 0.5
    try:
        chol_inv = scipy.linalg.cholesky(inv, lower=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(f"inverse lost positive definiteness: {exc}") from exc
    return HessianState(
        H=H,
        damping=damping,
        H_inv_diag=np.diag(inv).copy(),
        chol_inv=chol_inv,
    )


def salience_map(
    w: np.ndarray,
    hs: HessianState,
    beta: int,
    use_chol_diag: bool = False,
) -> SalienceMap:
    """Element salience plus its per-group and per-channel means.

    use_chol_diag switches the denominator from the inverse diagonal to the
    diagonal of its upper Cholesky factor, for A/B comparison of the two
    conventions; the default is the inverse diagonal.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeMismatch(f"weights must be 2-D, got {w.shape}")
    n, m = w.shape
    if m != hs.H_inv_diag.shape[0]:
        raise ShapeMismatch(f"weights have {m} channels, Gram matrix has {hs.H_inv_diag.shape[0]}")
    if beta < 1 or m % beta != 0:
        raise BadGroupSize(f"group size {beta} does not divide {m} channels")
    denom = np.diag(hs.chol_inv) if use_chol_diag else hs.H_inv_diag
    delta = (w * w) / (denom * denom)[None, :]
    k = m // beta
    group_mean = delta.reshape(n, k, beta).mean(axis=(0, 2))
    channel_mean = delta.mean(axis=0)
    return SalienceMap(delta=delta, group_mean=group_mean, channel_mean=channel_mean)


def salient_mask_3sigma(delta_block: np.ndarray) -> np.ndarray:
    """True where salience exceeds mean + 3 population standard deviations
    of its own block."""
    d = np.asarray(delta_block, dtype=np.float64)
    if d.size == 0:
        raise ShapeMismatch("empty salience block")
    return d > d.mean() + 3.0 * d.std()
