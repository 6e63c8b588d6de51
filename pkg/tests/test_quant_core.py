"""Tests for the affine group quantizer and the sign binarizer.

The reference oracle re-derives every code with scalar Python arithmetic,
one element at a time, so any vectorization slip in the library shows up
as an exact mismatch.
"""

import numpy as np
import pytest

from slimquant.errors import ShapeMismatch
from slimquant.quant_core import (
    RANGE_FLOOR,
    GroupQuantParams,
    QuantizedBlock,
    binarize,
    binarize_block,
    block_mse,
    dequantize,
    derive_params,
    params_from_range,
    quantize_uniform,
)


def scalar_reference(block, bits):
    """Elementwise re-derivation of codes, scales and zero-points."""
    n, width = block.shape
    maxq = (1 << bits) - 1
    codes = np.zeros((n, width), dtype=np.uint8)
    scales = np.zeros(n, dtype=np.float32)
    zeros = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        row = [float(v) for v in np.asarray(block[i], dtype=np.float64)]
        lo = min(min(row), 0.0)
        hi = max(max(row), 0.0)
        span = hi - lo
        degenerate = span == 0.0
        if degenerate:
            span = max(abs(hi), 1.0) * RANGE_FLOOR
        scale = np.float32(span / maxq)
        if not scale > 0.0:
            scale = np.float32(RANGE_FLOOR / maxq)
        if degenerate:
            z = 0.0
        else:
            z = float(np.clip(-np.rint(lo / float(scale)), 0, maxq))
        scales[i] = scale
        zeros[i] = np.uint8(z)
        for j, v in enumerate(row):
            c = np.clip(np.rint(v / float(scale)) + z, 0, maxq)
            codes[i, j] = np.uint8(c)
    return codes, scales, zeros


def test_unit_grid_row_is_exact():
    block = np.array([[0.0, 1.0, 2.0, 3.0]], dtype=np.float32)
    qb = quantize_uniform(block, 2)
    assert np.array_equal(qb.codes, [[0, 1, 2, 3]])
    assert qb.params.scale[0] == np.float32(1.0)
    assert qb.params.zero[0] == 0
    assert np.array_equal(dequantize(qb), block)


def test_constant_rows_decode_exactly():
    block = np.array([[5.0, 5.0, 5.0], [-5.0, -5.0, -5.0]], dtype=np.float32)
    qb = quantize_uniform(block, 2)
    # positive constants sit at the top of the zero-extended grid,
    # negative constants at the bottom; both decode without error
    assert np.array_equal(qb.codes, [[3, 3, 3], [0, 0, 0]])
    assert np.array_equal(dequantize(qb), block)


def test_all_zero_row_uses_range_floor():
    block = np.zeros((1, 4), dtype=np.float32)
    qb = quantize_uniform(block, 2)
    assert np.array_equal(qb.codes, np.zeros((1, 4)))
    assert qb.params.zero[0] == 0
    assert qb.params.scale[0] == np.float32(RANGE_FLOOR / 3.0)
    assert np.array_equal(dequantize(qb), block)


@pytest.mark.parametrize("bits", [1, 2, 3, 4])
def test_matches_scalar_reference(bits):
    rng = np.random.default_rng(100 + bits)
    for trial in range(50):
        n = int(rng.integers(1, 9))
        width = int(rng.integers(1, 24))
        kind = trial % 4
        if kind == 0:
            block = rng.standard_normal((n, width)) * rng.uniform(0.01, 20.0)
        elif kind == 1:
            block = np.abs(rng.standard_normal((n, width)))  # single-sign
        elif kind == 2:
            block = -np.abs(rng.standard_normal((n, width)))
        else:
            block = np.repeat(rng.standard_normal((n, 1)), width, axis=1)
        block = block.astype(np.float32)
        qb = quantize_uniform(block, bits)
        codes, scales, zeros = scalar_reference(block, bits)
        assert np.array_equal(qb.codes, codes)
        assert np.array_equal(qb.params.scale, scales)
        assert np.array_equal(qb.params.zero, zeros)


def test_invariants_hold_on_random_blocks():
    rng = np.random.default_rng(7)
    for bits in (1, 2, 3, 4):
        maxq = (1 << bits) - 1
        for _ in range(40):
            block = (rng.standard_normal((6, 32)) * 3.0).astype(np.float32)
            qb = quantize_uniform(block, bits)
            assert qb.codes.dtype == np.uint8
            assert qb.codes.max() <= maxq
            assert np.all(qb.params.scale > 0.0)
            assert qb.params.zero.max() <= maxq
            # derived params cover the data, so error stays within half a step
            err = np.abs(dequantize(qb).astype(np.float64) - block)
            bound = qb.params.scale.astype(np.float64)[:, None] * (0.5 + 1e-5)
            assert np.all(err <= bound)


def test_round_half_to_even():
    # w / scale == 0.5 and 1.5 exactly: both round toward the even code
    block = np.array([[0.5, 1.5, 3.0]], dtype=np.float32)
    qb = quantize_uniform(block, 2)
    assert qb.params.scale[0] == np.float32(1.0)
    assert np.array_equal(qb.codes, [[0, 2, 3]])


def test_requantize_is_idempotent():
    rng = np.random.default_rng(21)
    for bits in (1, 2, 3, 4):
        for _ in range(25):
            block = (rng.standard_normal((4, 16)) * 5.0).astype(np.float32)
            qb = quantize_uniform(block, bits)
            again = quantize_uniform(dequantize(qb), bits)
            assert np.array_equal(qb.codes, again.codes)


def test_explicit_params_are_respected():
    block = np.array([[0.0, 0.9, 2.1, 3.0]], dtype=np.float32)
    params = GroupQuantParams(
        bit_width=2,
        scale=np.array([1.0], dtype=np.float32),
        zero=np.array([0], dtype=np.uint8),
    )
    qb = quantize_uniform(block, 2, params=params)
    assert qb.params is params
    assert np.array_equal(qb.codes, [[0, 1, 2, 3]])


def test_explicit_params_width_must_match():
    params = GroupQuantParams(
        bit_width=3,
        scale=np.ones(1, dtype=np.float32),
        zero=np.zeros(1, dtype=np.uint8),
    )
    with pytest.raises(ShapeMismatch):
        quantize_uniform(np.zeros((1, 4), dtype=np.float32), 2, params=params)


def test_clamp_applies_with_narrow_params():
    # params cover [0, 3] but the data reaches 9: codes must clamp at maxq
    params = GroupQuantParams(
        bit_width=2,
        scale=np.array([1.0], dtype=np.float32),
        zero=np.array([0], dtype=np.uint8),
    )
    block = np.array([[-4.0, 9.0]], dtype=np.float32)
    qb = quantize_uniform(block, 2, params=params)
    assert np.array_equal(qb.codes, [[0, 3]])


def test_gamma_shrinks_scale():
    lo = np.array([0.0])
    hi = np.array([3.0])
    full = params_from_range(lo, hi, 2, gamma=1.0)
    tight = params_from_range(lo, hi, 2, gamma=0.5)
    assert full.scale[0] == np.float32(1.0)
    assert tight.scale[0] == np.float32(0.5)
    assert tight.zero[0] == 0


def test_gamma_keeps_zero_point_in_range():
    rng = np.random.default_rng(33)
    for _ in range(50):
        block = (rng.standard_normal((5, 12)) * 4.0).astype(np.float32)
        lo = np.minimum(block.min(axis=1), 0.0).astype(np.float64)
        hi = np.maximum(block.max(axis=1), 0.0).astype(np.float64)
        for gamma in (0.9, 1.0, 1.1):
            p = params_from_range(lo, hi, 2, gamma=gamma)
            assert p.zero.max() <= 3
            assert np.all(p.scale > 0.0)


def test_bit_width_bounds():
    with pytest.raises(ValueError):
        quantize_uniform(np.zeros((1, 2), dtype=np.float32), 0)
    with pytest.raises(ValueError):
        quantize_uniform(np.zeros((1, 2), dtype=np.float32), 5)


def test_non_2d_block_rejected():
    with pytest.raises(ShapeMismatch):
        quantize_uniform(np.zeros(4, dtype=np.float32), 2)


def test_scale_zero_shape_agreement():
    with pytest.raises(ShapeMismatch):
        GroupQuantParams(
            bit_width=2,
            scale=np.ones(2, dtype=np.float32),
            zero=np.zeros(3, dtype=np.uint8),
        )


def test_binarize_signs_and_magnitude():
    block = np.array([[1.0, -2.0, 0.0, 3.0]], dtype=np.float32)
    signs, alpha = binarize(block)
    assert np.array_equal(signs, [[1.0, -1.0, 1.0, 1.0]])
    assert alpha == pytest.approx(1.5)


def test_binarize_magnitude_is_mean_abs():
    rng = np.random.default_rng(9)
    for _ in range(20):
        block = (rng.standard_normal((3, 10)) * 2.0).astype(np.float32)
        signs, alpha = binarize(block)
        ref = float(np.mean([abs(float(v)) for v in block.ravel()]))
        assert alpha == pytest.approx(ref, rel=1e-12)
        assert set(np.unique(signs)) <= {-1.0, 1.0}


def test_binarize_sign_flip_mirrors_signs():
    rng = np.random.default_rng(10)
    block = rng.standard_normal((4, 8)).astype(np.float32)
    block[np.abs(block) < 1e-6] = 0.1  # keep signs unambiguous
    s1, a1 = binarize(block)
    s2, a2 = binarize(-block)
    assert np.array_equal(s1, -s2)
    assert a1 == a2


def test_binarize_block_decodes_to_signed_magnitude():
    block = np.array([[0.5, -1.5], [2.0, -2.0]], dtype=np.float32)
    qb = binarize_block(block)
    assert qb.params.binary
    assert qb.params.bit_width == 1
    assert np.array_equal(qb.codes, [[1, 0], [1, 0]])
    alpha = np.float32(1.5)
    assert np.array_equal(dequantize(qb), np.array(
        [[alpha, -alpha], [alpha, -alpha]], dtype=np.float32))


def test_binarize_empty_rejected():
    with pytest.raises(ShapeMismatch):
        binarize(np.zeros((0, 4), dtype=np.float32))


def test_block_mse_hand_values():
    assert block_mse(np.zeros((1, 2)), np.ones((1, 2))) == 2.0
    a = np.array([[1.0, 2.0]], dtype=np.float32)
    assert block_mse(a, a) == 0.0


def test_block_mse_matches_loop():
    rng = np.random.default_rng(12)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((5, 7))
    ref = sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel()))
    assert block_mse(a, b) == pytest.approx(ref, rel=1e-12)


def test_block_mse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        block_mse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_one_bit_affine_differs_from_binary():
    # default 1-bit mode is the affine map, not sign/magnitude
    block = np.array([[-1.0, 2.0]], dtype=np.float32)
    qb = quantize_uniform(block, 1)
    assert not qb.params.binary
    assert qb.params.scale[0] == np.float32(3.0)
    assert qb.params.zero[0] == 0  # rint(1/3) = 0
    assert np.array_equal(qb.codes, [[0, 1]])


def test_derive_params_float32_scale():
    p = derive_params(np.array([[0.0, 1.0]], dtype=np.float32), 3)
    assert p.scale.dtype == np.float32
    assert p.zero.dtype == np.uint8
    assert p.scale[0] == np.float32(1.0 / 7.0)
