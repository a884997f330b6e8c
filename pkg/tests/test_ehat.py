#!/usr/bin/env python3
"""
Unit tests for ehat.py

Tests MHCA projection, the three HARN variants, HCA gating and visual-pathway tying.
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ehatcap.attention import build_mask
from ehatcap.errors import ConfigurationError, ContractError, DimensionError
from ehatcap.ehat import (
    HcaParams,
    MhcaParams,
    gamma_o,
    harn,
    harn_prototype,
    harn_variant1,
    harn_variant2,
    hca,
    hca_delta,
    hca_scores,
    hetero_weight,
    init_harn,
    mhca,
    mhca_project,
    mhca_project_prefix,
    shared_anchor_state,
    tie_visual_pathways,
)
from ehatcap.tensor import ParameterStore, RngStream, tensor

pytestmark = pytest.mark.unit

D = 8


def make_harn(variant, seed=0, **kwargs):
    return init_harn(ParameterStore(), "harn", D, variant, RngStream(seed), **kwargs)


def square_inputs(random_matrix, seed=0, scale=1.0):
    return tuple(tensor(random_matrix(D, D, seed=seed + i, scale=scale)) for i in range(3))


# ===== MHCA =====


def test_mhca_project_of_zeros_is_zero():
    for rows, cols in ((3, 4), (1, 2), (7, 8)):
        out = mhca_project(tensor(np.zeros((rows, cols))), None)
        assert out.shape == (cols, cols)
        assert not out.data.any()


def test_mhca_project_maps_to_square(random_matrix):
    out = mhca_project(tensor(random_matrix(7, D)), None)
    assert out.shape == (D, D)
    np.testing.assert_allclose(out.data, out.data.T, atol=1e-12)


def test_mhca_project_is_deterministic_in_eval_mode(random_matrix):
    x = tensor(random_matrix(5, D))
    first = mhca_project(x, None, rate=0.5, mode="eval").data
    second = mhca_project(x, None, rate=0.5, mode="eval").data
    np.testing.assert_array_equal(first, second)


def test_mhca_train_dropout_is_reproducible(random_matrix):
    x = tensor(random_matrix(5, D))
    first = mhca_project(x, None, 0.5, "train", RngStream(7)).data
    second = mhca_project(x, None, 0.5, "train", RngStream(7)).data
    other = mhca_project(x, None, 0.5, "train", RngStream(8)).data
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, other)


def test_mhca_matmul_mode_is_plain_gram(random_matrix):
    x = random_matrix(6, D)
    out = mhca_project(tensor(x), None, attention_mode="matmul")
    np.testing.assert_allclose(out.data, x.T @ x / math.sqrt(D), atol=1e-12)


def test_mhca_padding_ignores_trailing_rows(random_matrix):
    x = random_matrix(6, D)
    mask = build_mask("padding", 6, 4)
    before = mhca_project(tensor(x), mask).data
    x[4:] = 50.0
    after = mhca_project(tensor(x), mask).data
    np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)


def test_mhca_prefix_blocks_match_truncated_projection(random_matrix):
    """Test that block t of the stacked form only sees rows <= t."""
    m = 5
    x = random_matrix(m, D, seed=3)
    stacked = mhca_project_prefix(tensor(x), build_mask("causal", m)).data
    assert stacked.shape == (m * D, D)
    for t in range(m):
        block = stacked[t * D : (t + 1) * D]
        expected = mhca_project(tensor(x[: t + 1]), build_mask("causal", t + 1)).data
        np.testing.assert_allclose(block, expected, rtol=1e-10, atol=1e-12)


def test_mhca_fully_masked_input_is_a_contract_error(random_matrix):
    with pytest.raises(ContractError):
        mhca_project(tensor(random_matrix(3, D)), build_mask("padding", 3, 0))


def test_mhca_paths_are_independent(random_matrix):
    o = tensor(random_matrix(10, D, seed=1))
    e = tensor(random_matrix(6, D, seed=2))
    c = tensor(random_matrix(6, D, seed=3))
    params = MhcaParams(dropout_rate=0.0)
    o_hat, e_hat, c_hat = mhca(o, e, c, (None, None, None), params)
    o_swap, e_swap, c_swap = mhca(o, c, e, (None, None, None), params)
    assert o_hat.shape == e_hat.shape == c_hat.shape == (D, D)
    np.testing.assert_array_equal(o_swap.data, o_hat.data)
    np.testing.assert_array_equal(e_swap.data, c_hat.data)
    np.testing.assert_array_equal(c_swap.data, e_hat.data)


def test_mhca_of_zeros_gives_three_zero_matrices():
    zeros = tensor(np.zeros((4, D)))
    outputs = mhca(zeros, zeros, zeros, (None, None, None), MhcaParams())
    assert all(not out.data.any() for out in outputs)


def test_mhca_rejects_mismatched_widths(random_matrix):
    with pytest.raises(DimensionError):
        mhca(
            tensor(random_matrix(3, D)),
            tensor(random_matrix(3, 4)),
            tensor(random_matrix(3, D)),
            (None, None, None),
            MhcaParams(),
        )


def test_config_objects_validate():
    with pytest.raises(ConfigurationError):
        MhcaParams(dropout_rate=1.0)
    with pytest.raises(ConfigurationError):
        MhcaParams(mode="conv")
    with pytest.raises(ConfigurationError):
        HcaParams(lam=-0.1)
    assert HcaParams().lam == 0.3


# ===== HARN =====


def test_hetero_weight_of_zeros_is_one_half():
    params = make_harn("prototype")
    zero = tensor(np.zeros((D, D)))
    omega = hetero_weight(zero, zero, params, "e", "o1")
    assert omega.shape == (D, 1)
    np.testing.assert_allclose(omega.data, 0.5)


def test_hetero_weight_stays_inside_unit_interval(random_matrix):
    """Test inputs up to +-50 scale, where the exponent ratio would overflow."""
    params = make_harn("prototype")
    for seed in range(20):
        scale = 50.0 if seed % 2 else 1.0
        x_hat, o_j, _ = square_inputs(random_matrix, seed * 3, scale)
        omega = hetero_weight(x_hat, o_j, params, "e", "o1").data
        assert np.isfinite(omega).all()
        assert ((omega > 0.0) & (omega < 1.0)).all()


def test_ones_weight_mode_returns_ones(random_matrix):
    params = make_harn("prototype", weight_mode="ones")
    x_hat, o_j, _ = square_inputs(random_matrix)
    np.testing.assert_array_equal(hetero_weight(x_hat, o_j, params, "c", "o2").data, 1.0)


def test_gamma_o_zero_and_shape():
    params = make_harn("prototype")
    assert not gamma_o(tensor(np.zeros((D, D))), params, "o1").data.any()
    with pytest.raises(DimensionError):
        gamma_o(tensor(np.zeros((D, 2))), params, "o1")


@pytest.mark.parametrize("variant", ["prototype", "v1", "v2"])
def test_harn_shapes_and_finiteness(variant, random_matrix):
    params = make_harn(variant)
    e_tilde, c_tilde, omega = harn(*square_inputs(random_matrix, scale=100.0), params)
    assert e_tilde.shape == c_tilde.shape == (D, D)
    assert omega.omega_e.shape == omega.omega_c.shape == (D, 1)
    for out in (e_tilde, c_tilde, omega.omega_e, omega.omega_c):
        assert np.isfinite(out.data).all()


@pytest.mark.parametrize("variant", ["prototype", "v1", "v2"])
def test_harn_zero_inputs_give_bias_outputs(variant):
    params = make_harn(variant)
    zero = tensor(np.zeros((D, D)))
    e_tilde, c_tilde, omega = harn(zero, zero, zero, params)
    np.testing.assert_array_equal(e_tilde.data, np.tile(params["out_e.b"].data, (D, 1)))
    np.testing.assert_array_equal(c_tilde.data, np.tile(params["out_c.b"].data, (D, 1)))
    np.testing.assert_allclose(omega.omega_e.data, 0.5)


def test_harn_variants_reject_foreign_weights(random_matrix):
    inputs = square_inputs(random_matrix)
    with pytest.raises(ContractError):
        harn_variant1(*inputs, make_harn("prototype"))
    with pytest.raises(ContractError):
        harn_variant2(*inputs, make_harn("v1"))
    with pytest.raises(ContractError):
        harn_prototype(*inputs, make_harn("v2"))


def test_init_harn_rejects_unknown_options():
    with pytest.raises(ConfigurationError):
        make_harn("v3")
    with pytest.raises(ConfigurationError):
        make_harn("prototype", weight_mode="softmax")
    with pytest.raises(ConfigurationError):
        make_harn("prototype", input_mode="sum")


def test_variant1_has_fewer_parameters():
    prototype = make_harn("prototype")
    v1 = make_harn("v1")
    assert v1.count() < prototype.count()
    assert prototype.count() - v1.count() == 2 * (D * D + D) + D


def test_tied_prototype_equals_variant1(random_matrix):
    """Test that tying the two visual MLPs collapses the prototype onto v1 exactly."""
    prototype = make_harn("prototype", seed=4)
    tie_visual_pathways(prototype)
    assert prototype.count() == make_harn("v1").count()
    v1 = make_harn("v1", seed=9)
    v1.store.load_state_dict(shared_anchor_state(prototype, "harn"))
    for seed in range(100):
        inputs = square_inputs(random_matrix, seed * 3)
        e_p, c_p, w_p = harn_prototype(*inputs, prototype)
        e_1, c_1, w_1 = harn_variant1(*inputs, v1)
        assert np.abs(e_p.data - e_1.data).max() == 0.0
        assert np.abs(c_p.data - c_1.data).max() == 0.0
        assert np.abs(w_p.omega_c.data - w_1.omega_c.data).max() == 0.0


def test_tying_variant1_is_rejected():
    with pytest.raises(ContractError):
        tie_visual_pathways(make_harn("v1"))
    with pytest.raises(ContractError):
        shared_anchor_state(make_harn("v1"), "harn")


def test_variant2_with_zero_other_language(random_matrix):
    """Test that a zero Ĉ leaves Ẽ = (ω_E ⊙ Ê) W_top + b."""
    params = make_harn("v2")
    o_hat, e_hat, _ = square_inputs(random_matrix)
    e_tilde, _, omega = harn_variant2(o_hat, e_hat, tensor(np.zeros((D, D))), params)
    scaled = e_hat.data * omega.omega_e.data
    expected = scaled @ params["out_e.W"].data[:D] + params["out_e.b"].data
    np.testing.assert_allclose(e_tilde.data, expected, atol=1e-12)


def test_variant2_substitutes_other_language(random_matrix):
    """Test that v2 feeds Ĉ where the prototype feeds the unscaled Ê."""
    proto = make_harn("prototype", seed=2)
    v2 = make_harn("v2", seed=2)
    o_hat, e_hat, c_hat = square_inputs(random_matrix, seed=5)
    e_tilde, _, omega = harn_variant2(o_hat, e_hat, c_hat, v2)
    w, b = v2["out_e.W"].data, v2["out_e.b"].data
    scaled = e_hat.data * omega.omega_e.data
    np.testing.assert_allclose(e_tilde.data, scaled @ w[:D] + c_hat.data @ w[D:] + b, atol=1e-12)
    p_tilde, _, p_omega = harn_prototype(o_hat, e_hat, c_hat, proto)
    pw, pb = proto["out_e.W"].data, proto["out_e.b"].data
    p_scaled = e_hat.data * p_omega.omega_e.data
    np.testing.assert_allclose(
        p_tilde.data, e_hat.data @ pw[:D] + p_scaled @ pw[D:] + pb, atol=1e-12
    )


def test_harn_on_stacked_blocks_matches_per_block(random_matrix):
    params = make_harn("prototype")
    o_hat = tensor(random_matrix(D, D, seed=1))
    e_blocks = [random_matrix(D, D, seed=10 + t) for t in range(3)]
    c_blocks = [random_matrix(D, D, seed=20 + t) for t in range(3)]
    e_tilde, c_tilde, _ = harn(
        o_hat, tensor(np.vstack(e_blocks)), tensor(np.vstack(c_blocks)), params
    )
    assert e_tilde.shape == (3 * D, D)
    for t in range(3):
        e_t, c_t, _ = harn(o_hat, tensor(e_blocks[t]), tensor(c_blocks[t]), params)
        np.testing.assert_allclose(e_tilde.data[t * D : (t + 1) * D], e_t.data, atol=1e-12)
        np.testing.assert_allclose(c_tilde.data[t * D : (t + 1) * D], c_t.data, atol=1e-12)


def test_zero_initialised_output_gives_zero_harn():
    params = make_harn("prototype", zero_init_output=True)
    inputs = tuple(tensor(RngStream(i).normal((D, D))) for i in range(3))
    e_tilde, c_tilde, _ = harn(*inputs, params)
    assert not e_tilde.data.any()
    assert not c_tilde.data.any()


# ===== HCA =====


def test_hca_example():
    out = hca(tensor(np.eye(2)), tensor(np.zeros((2, 2))), 0.3)
    np.testing.assert_allclose(out.data, [[1.15, 0.0], [0.0, 1.15]], atol=1e-12)


def test_hca_with_zero_gate_is_identity(random_matrix):
    e = random_matrix(5, D)
    out = hca(tensor(e), tensor(random_matrix(D, D, seed=1)), 0.0)
    np.testing.assert_array_equal(out.data, e)


def test_hca_rejects_negative_gate(random_matrix):
    with pytest.raises(ConfigurationError):
        hca(tensor(random_matrix(2, D)), tensor(random_matrix(D, D)), -1.0)


def test_hca_scores_pair_rows_with_their_block(random_matrix):
    m = 4
    e = random_matrix(m, D)
    stacked = random_matrix(m * D, D, seed=2)
    scores = hca_scores(tensor(e), tensor(stacked)).data
    for t in range(m):
        expected = e[t] @ stacked[t * D : (t + 1) * D] / math.sqrt(D)
        np.testing.assert_allclose(scores[t], expected, atol=1e-12)
    with pytest.raises(DimensionError):
        hca_scores(tensor(e), tensor(random_matrix(3 * D, D)))


def test_hca_delta_is_residual_and_traced(random_matrix):
    e = tensor(random_matrix(3, D))
    e_tilde = tensor(random_matrix(D, D, seed=6))
    trace = {}
    delta = hca_delta(e, e_tilde, HcaParams(lam=0.3), trace, "hca_a")
    np.testing.assert_allclose(delta.data, hca(e, e_tilde, 0.3).data - e.data, atol=1e-12)
    assert trace["hca_a"].shape == (3, D)
    np.testing.assert_allclose(trace["hca_a"].sum(axis=1), 1.0)


def test_hca_matmul_mode_returns_plain_product(random_matrix):
    e = random_matrix(3, D)
    e_tilde = random_matrix(D, D, seed=6)
    out = hca_delta(tensor(e), tensor(e_tilde), HcaParams(mode="matmul"))
    np.testing.assert_allclose(out.data, e @ e_tilde / math.sqrt(D), atol=1e-12)
