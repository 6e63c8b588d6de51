"""Shared fixture builders for the test suite.

Everything here is seeded and deterministic so tests can freeze expected
values against specific RNG draws.
"""

from __future__ import annotations

import numpy as np

from slimquant.quant_core import GroupQuantParams, QuantizedBlock
from slimquant.salience import accumulate_hessian, damp_and_invert


def random_layer(rng, n, m, scale=1.0):
    """A plain Gaussian weight matrix in float32."""
    return (rng.standard_normal((n, m)) * scale).astype(np.float32)


def random_calib(rng, t, m, scale=1.0):
    """A single activation batch with t token rows and m channels."""
    return (rng.standard_normal((t, m)) * scale).astype(np.float32)


def identity_calib(m):
    """Activations whose Gram matrix is exactly the identity.

    m one-hot rows scaled by sqrt(m) give (1/m) * sum x x^T = I.
    """
    return (np.eye(m) * np.sqrt(m)).astype(np.float32)


def hessian_state(x, percdamp=0.01):
    return damp_and_invert(accumulate_hessian(x), percdamp)


def clustered_layer(seed, n=64, m=512, t=1024, n_clusters=3, base=0.08,
                    w_boost=8.0, x_boost=2.0):
    """Weight matrix with a few adjacent runs of high-variance channels.

    Returns (w, x): each cluster is 2 to 5 adjacent channels whose weights
    and activations both have inflated variance, so their salience dominates
    and quantization order matters. t is kept well above m so the empirical
    Gram matrix is comfortably full rank.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, m)) * base
    x = rng.standard_normal((t, m))
    starts = rng.choice(m - 6, size=n_clusters, replace=False)
    for start in starts:
        width = int(rng.integers(2, 6))
        w[:, start:start + width] *= w_boost
        x[:, start:start + width] *= x_boost
    return w.astype(np.float32), x.astype(np.float32)


def random_blocks(rng, n, m, beta, widths=None, binary=False):
    """Hand-built list of quantized blocks with valid codes and params."""
    k = m // beta
    if widths is None:
        widths = rng.integers(1, 5, size=k)
    blocks = []
    for g in range(k):
        bits = int(widths[g])
        maxq = (1 << bits) - 1
        codes = rng.integers(0, maxq + 1, size=(n, beta)).astype(np.uint8)
        scale = (rng.uniform(0.01, 2.0, size=n)).astype(np.float32)
        if binary and bits == 1:
            params = GroupQuantParams(1, scale, np.zeros(n, dtype=np.uint8),
                                      binary=True)
        else:
            zero = rng.integers(0, maxq + 1, size=n).astype(np.uint8)
            params = GroupQuantParams(bits, scale, zero)
        blocks.append(QuantizedBlock(codes=codes, params=params))
    return blocks, np.asarray(widths, dtype=np.int64)
