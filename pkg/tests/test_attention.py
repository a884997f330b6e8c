#!/usr/bin/env python3
"""
Unit tests for attention.py

Tests masks, scaled dot-product and multi-head attention, the feed-forward sublayer
and the attention calls over the spliced language block.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ehatcap.attention import (
    FfnParams,
    MultiHeadParams,
    build_mask,
    cross_attend,
    ffn,
    init_multi_head,
    multi_head,
    scaled_dot_attention,
    self_attend_language,
)
from ehatcap.errors import ConfigurationError, ContractError, DimensionError
from ehatcap.tensor import ParameterStore, RngStream, tensor

pytestmark = pytest.mark.unit


@pytest.fixture
def mh_params():
    store = ParameterStore()
    return init_multi_head(store, "mh", 8, 2, RngStream(0))


def identity_params(d):
    eye = tensor(np.eye(d))
    return MultiHeadParams(w_q=eye, w_k=eye, w_v=eye, w_o=eye, heads=1)


# ===== Masks =====


def test_causal_mask_is_lower_triangular():
    mask = build_mask("causal", 3)
    np.testing.assert_array_equal(mask.allowed, np.tril(np.ones((3, 3), dtype=bool)))
    assert mask.bias[0, 1] == -1e9
    assert mask.bias[1, 0] == 0.0


def test_padding_mask_forbids_trailing_keys():
    mask = build_mask("padding", 4, 2)
    assert mask.allowed[:, :2].all()
    assert not mask.allowed[:, 2:].any()
    np.testing.assert_array_equal(mask.query_valid, [True, True, False, False])


def test_combined_mask_is_logical_and():
    combined = build_mask("combined", 4, 3)
    expected = build_mask("causal", 4).allowed & build_mask("padding", 4, 3).allowed
    np.testing.assert_array_equal(combined.allowed, expected)


def test_block_causal_mask_spans_both_languages():
    """Test that position t of either block sees positions <= t of both blocks."""
    mask = build_mask("block_causal", 3, 3, valid_length_b=2)
    assert mask.shape == (6, 6)
    causal = np.tril(np.ones((3, 3), dtype=bool))
    np.testing.assert_array_equal(mask.allowed[:3, :3], causal)
    np.testing.assert_array_equal(mask.allowed[:3, 3:], causal & np.array([True, True, False]))
    np.testing.assert_array_equal(mask.allowed[3:, :3], causal)
    np.testing.assert_array_equal(mask.query_valid, [True, True, True, True, True, False])


def test_mask_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        build_mask("diagonal", 3)
    with pytest.raises(ConfigurationError):
        build_mask("padding", 3, 4)
    with pytest.raises(ConfigurationError):
        build_mask("causal", 0)


# ===== Scaled dot-product attention =====


def test_scaled_dot_attention_example():
    out = scaled_dot_attention(
        tensor([[1.0, 0.0]]),
        tensor([[1.0, 0.0], [0.0, 1.0]]),
        tensor([[1.0, 2.0], [3.0, 4.0]]),
    )
    np.testing.assert_allclose(out.data, [[1.6604, 2.6604]], atol=1e-4)


def test_single_key_returns_its_value(random_matrix):
    v = tensor([[5.0, -1.0, 2.0]])
    out = scaled_dot_attention(tensor(random_matrix(4, 3)), tensor(random_matrix(1, 3, 1)), v)
    np.testing.assert_allclose(out.data, np.repeat(v.data, 4, axis=0), atol=1e-12)


def test_identical_keys_average_values(random_matrix):
    k = tensor(np.ones((3, 2)))
    v = random_matrix(3, 2, seed=4)
    out = scaled_dot_attention(tensor(random_matrix(2, 2)), k, tensor(v))
    np.testing.assert_allclose(out.data, np.repeat(v.mean(axis=0, keepdims=True), 2, axis=0))


def test_outputs_lie_in_convex_hull_of_values(random_matrix):
    for seed in range(10):
        q = tensor(random_matrix(4, 3, seed=seed))
        k = tensor(random_matrix(6, 3, seed=seed + 100))
        v = random_matrix(6, 3, seed=seed + 200)
        out = scaled_dot_attention(q, k, tensor(v)).data
        assert (out >= v.min(axis=0) - 1e-9).all()
        assert (out <= v.max(axis=0) + 1e-9).all()


def test_fully_masked_rows_are_contract_errors(random_matrix):
    x = tensor(random_matrix(3, 2))
    with pytest.raises(ContractError):
        scaled_dot_attention(x, x, x, build_mask("padding", 3, 0))


def test_attention_shape_errors(random_matrix):
    with pytest.raises(DimensionError):
        scaled_dot_attention(
            tensor(random_matrix(2, 3)), tensor(random_matrix(2, 4)), tensor(random_matrix(2, 4))
        )
    with pytest.raises(DimensionError):
        scaled_dot_attention(
            tensor(random_matrix(2, 3)), tensor(random_matrix(2, 3)), tensor(random_matrix(3, 3))
        )
    x = tensor(random_matrix(3, 2))
    with pytest.raises(DimensionError):
        scaled_dot_attention(x, x, x, build_mask("causal", 4))


# ===== Multi-head attention =====


def test_single_head_identity_equals_scaled_dot_attention(random_matrix):
    params = identity_params(4)
    for seed in range(50):
        q = tensor(random_matrix(3, 4, seed=seed))
        kv = tensor(random_matrix(5, 4, seed=seed + 1000))
        diff = multi_head(q, kv, kv, params).data - scaled_dot_attention(q, kv, kv).data
        assert np.abs(diff).max() < 1e-12


def test_multi_head_output_shape(mh_params, random_matrix):
    kv = tensor(random_matrix(7, 8))
    out = multi_head(tensor(random_matrix(3, 8)), kv, kv, mh_params)
    assert out.shape == (3, 8)
    assert mh_params.d_k == 4


def test_multi_head_rejects_indivisible_width():
    with pytest.raises(ConfigurationError):
        init_multi_head(ParameterStore(), "mh", 6, 4, RngStream(0))


# ===== Feed-forward =====


def test_ffn_identity_example():
    eye = tensor(np.eye(2))
    params = FfnParams(w1=eye, b1=tensor(np.zeros(2)), w2=eye, b2=tensor(np.zeros(2)))
    np.testing.assert_allclose(ffn(tensor([[-1.0, 2.0]]), params).data, [[0.0, 2.0]])


def test_ffn_negative_preactivation_gives_bias():
    params = FfnParams(
        w1=tensor(np.eye(2)),
        b1=tensor([-10.0, -10.0]),
        w2=tensor(np.ones((2, 2))),
        b2=tensor([0.5, -0.5]),
    )
    out = ffn(tensor([[1.0, 2.0], [3.0, -4.0]]), params)
    np.testing.assert_allclose(out.data, [[0.5, -0.5], [0.5, -0.5]])


# ===== Language blocks =====


def test_block_causal_self_attention_ignores_future_tokens(mh_params, random_matrix):
    """Test that perturbing positions > t of either language leaves rows <= t unchanged."""
    m = 4
    mask = build_mask("block_causal", m)
    base = random_matrix(2 * m, 8, seed=1)
    reference = self_attend_language(tensor(base), mh_params, mask).data
    rng = np.random.default_rng(5)
    for _ in range(100):
        t = int(rng.integers(0, m - 1))
        block = int(rng.integers(0, 2))
        perturbed = base.copy()
        start = block * m + t + 1
        perturbed[start : (block + 1) * m] += rng.normal(size=(m - t - 1, 8))
        out = self_attend_language(tensor(perturbed), mh_params, mask).data
        past = np.r_[0 : t + 1, m : m + t + 1]
        np.testing.assert_allclose(out[past], reference[past], rtol=0, atol=1e-12)


def test_single_token_per_language(mh_params, random_matrix):
    mask = build_mask("block_causal", 1)
    out = self_attend_language(tensor(random_matrix(2, 8)), mh_params, mask)
    assert out.shape == (2, 8)
    with pytest.raises(DimensionError):
        self_attend_language(tensor(random_matrix(3, 8)), mh_params, build_mask("causal", 3))


def test_cross_attention_ignores_padded_regions(mh_params, random_matrix):
    lang = tensor(random_matrix(6, 8))
    regions = random_matrix(5, 8, seed=2)
    mask = build_mask("padding", 5, 3, queries=6)
    before = cross_attend(lang, tensor(regions), mh_params, mask).data
    regions[3:] = 100.0
    after = cross_attend(lang, tensor(regions), mh_params, mask).data
    np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)
    assert after.shape == (6, 8)


def test_cross_attention_single_region(mh_params, random_matrix):
    region = tensor(random_matrix(1, 8, seed=3))
    out = cross_attend(tensor(random_matrix(4, 8)), region, mh_params).data
    expected = (region.data @ mh_params.w_v.data) @ mh_params.w_o.data
    np.testing.assert_allclose(out, np.repeat(expected, 4, axis=0), atol=1e-12)


def test_cross_attention_needs_a_valid_region(mh_params, random_matrix):
    with pytest.raises(ContractError):
        cross_attend(
            tensor(random_matrix(2, 8)),
            tensor(random_matrix(3, 8)),
            mh_params,
            build_mask("padding", 3, 0, queries=2),
        )
