"""Sanity anchors for the dense reference implementations themselves.

The reference functions back every engine comparison, so they get their own
closed-form checks: selector kernels, zero weights, hand-computed windows.
"""

from __future__ import annotations

import numpy as np
import pytest

from bitunet.oracle import (
    THRESH_CONST_NEG,
    THRESH_CONST_POS,
    THRESH_GE,
    THRESH_LE,
    ref_bn_sign,
    ref_concat,
    ref_conv,
    ref_float_conv,
    ref_pool,
    ref_tconv,
    ref_threshold,
)


def test_ref_conv_zero_weights_give_zero(rng):
    x = rng.choice((-1, 1), size=(1, 4, 4, 3)).astype(np.int8)
    w = np.zeros((2, 3, 3, 3), dtype=np.int8)
    assert not ref_conv(x, w, padding=1).any()


def test_ref_conv_unit_selector_passes_input_through(rng):
    # a 1x1 kernel that copies channel j of the input
    x = rng.choice((-1, 1), size=(1, 5, 5, 4)).astype(np.int8)
    w = np.zeros((4, 1, 1, 4), dtype=np.int8)
    for j in range(4):
        w[j, 0, 0, j] = 1
    assert np.array_equal(ref_conv(x, w), x.astype(np.int32))


def test_ref_conv_hand_computed_window():
    x = np.array([[1, -1], [-1, 1]], dtype=np.int8).reshape(1, 2, 2, 1)
    w = np.ones((1, 2, 2, 1), dtype=np.int8)
    # single valid window: 1 - 1 - 1 + 1 = 0
    assert ref_conv(x, w).reshape(-1).tolist() == [0]
    # padding=1 with pad_value=-1: corner windows see three -1 pads + x[0,0]
    padded = ref_conv(x, w, padding=1)
    assert padded.shape == (1, 3, 3, 1)
    assert padded[0, 0, 0, 0] == -3 + 1
    # zero padding: corners see only the one real pixel
    assert ref_conv(x, w, padding=1, pad_value=0)[0, 0, 0, 0] == 1


def test_ref_conv_counts_oob_exactly():
    # all-ones input and weights: accumulator equals the in-bounds tap count
    x = np.ones((1, 3, 3, 1), dtype=np.int8)
    w = np.ones((1, 3, 3, 1), dtype=np.int8)
    acc = ref_conv(x, w, padding=1, pad_value=0)
    assert acc[0, 1, 1, 0] == 9
    assert acc[0, 0, 0, 0] == 4
    assert acc[0, 0, 1, 0] == 6


def test_ref_conv_rejects_bad_alphabets():
    with pytest.raises(ValueError):
        ref_conv(np.zeros((1, 2, 2, 1)), np.ones((1, 1, 1, 1)))  # 0 activation
    with pytest.raises(ValueError):
        ref_conv(np.ones((1, 2, 2, 1)), np.full((1, 1, 1, 1), 2))  # weight 2
    with pytest.raises(ValueError):
        ref_conv(np.ones((1, 2, 2, 1)), np.ones((1, 1, 1, 2)))  # c_in mismatch


def test_ref_tconv_scatters_single_pixel():
    x = np.ones((1, 1, 1, 1), dtype=np.int8)
    w = np.arange(-1, 3, dtype=np.int8).clip(-1, 1).reshape(1, 2, 2, 1)  # [-1,0,1,1]
    out = ref_tconv(x, w, 2)
    assert out.shape == (1, 2, 2, 1)
    assert out.reshape(-1).tolist() == [-1, 0, 1, 1]


def test_ref_tconv_rejects_kernel_stride_mismatch():
    with pytest.raises(ValueError):
        ref_tconv(np.ones((1, 1, 1, 1)), np.ones((1, 2, 2, 1)), 3)


def test_ref_pool_is_max_over_windows():
    x = -np.ones((1, 2, 2, 1), dtype=np.int8)
    assert ref_pool(x).reshape(-1).tolist() == [-1]
    x[0, 1, 1, 0] = 1
    assert ref_pool(x).reshape(-1).tolist() == [1]
    with pytest.raises(ValueError):
        ref_pool(np.ones((1, 3, 2, 1), dtype=np.int8))


def test_ref_threshold_all_codes():
    acc = np.array([[-5, 0, 5]]).reshape(1, 1, 3, 1).repeat(4, axis=3)
    t = np.array([0, 0, 0, 0], dtype=np.int32)
    codes = np.array([THRESH_GE, THRESH_LE, THRESH_CONST_NEG, THRESH_CONST_POS])
    out = ref_threshold(acc, t, codes)
    assert out[0, 0, :, 0].tolist() == [-1, 1, 1]  # >= 0
    assert out[0, 0, :, 1].tolist() == [1, 1, -1]  # <= 0
    assert out[0, 0, :, 2].tolist() == [-1, -1, -1]
    assert out[0, 0, :, 3].tolist() == [1, 1, 1]
    with pytest.raises(ValueError):
        ref_threshold(acc, t, np.array([9, 9, 9, 9]))


def test_ref_bn_sign_sign_of_zero_is_positive():
    acc = np.array([0.0]).reshape(1, 1, 1, 1)
    out = ref_bn_sign(acc, [1.0], [0.0], [0.0], [1.0], 1e-5)
    assert out.reshape(-1).tolist() == [1]


def test_ref_float_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 4, 4, 2))
    w = np.zeros((2, 1, 1, 2))
    w[0, 0, 0, 0] = w[1, 0, 0, 1] = 1.0
    assert np.allclose(ref_float_conv(x, w), x)
    bias = np.array([1.0, -1.0])
    assert np.allclose(ref_float_conv(x, w, bias), x + bias)


def test_ref_concat_shapes():
    a = np.ones((1, 2, 2, 3))
    b = np.zeros((1, 2, 2, 2))
    assert ref_concat(a, b).shape == (1, 2, 2, 5)
    with pytest.raises(ValueError):
        ref_concat(a, np.zeros((1, 2, 3, 2)))
