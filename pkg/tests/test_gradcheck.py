#!/usr/bin/env python3
"""
Unit tests for gradcheck.py and the block-level gradient checks in experiments.py
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ehatcap import tensor as tensor_module
from ehatcap.errors import ContractError
from ehatcap.experiments import (
    GRADCHECK_BLOCKS,
    format_gradcheck_report,
    gradcheck_cases,
    run_gradcheck,
)
from ehatcap.gradcheck import grad_check, grad_check_report
from ehatcap.tensor import ParameterStore, mul, relu, sigmoid, sum_all, tensor


def _store(**arrays):
    store = ParameterStore()
    for name, values in arrays.items():
        store.add(name, values)
    return store


@pytest.mark.unit
def test_exact_gradient_has_tiny_error():
    store = _store(x=np.array([0.3, -1.2, 2.0]))
    err = grad_check(lambda p: sum_all(mul(sigmoid(p["x"]), tensor([1.0, 2.0, 3.0]))), store)
    assert err < 1e-8


@pytest.mark.unit
def test_nondeterministic_builder_is_rejected():
    """Test that a builder returning different losses raises ContractError."""
    store = _store(x=np.ones(2))
    calls = []

    def builder(p):
        calls.append(1)
        return sum_all(mul(p["x"], float(len(calls))))

    with pytest.raises(ContractError, match="not deterministic"):
        grad_check(builder, store)


@pytest.mark.unit
def test_non_scalar_builder_is_rejected():
    store = _store(x=np.ones(2))
    with pytest.raises(ContractError):
        grad_check(lambda p: mul(p["x"], 2.0), store)


@pytest.mark.unit
def test_relu_kinks_are_skipped():
    """Test that entries sitting on a relu kink are counted, not compared."""
    store = _store(x=np.array([0.0, 1.5, -2.0]))
    report = grad_check_report(lambda p: sum_all(mul(relu(p["x"]), tensor([1.0, 2.0, 3.0]))), store)
    assert report.skipped_kinks == 1
    assert report.checked == 2
    assert report.max_rel_error < 1e-8


@pytest.mark.unit
def test_gradients_are_cleared_after_check():
    store = _store(x=np.ones(3))
    grad_check(lambda p: sum_all(mul(p["x"], p["x"])), store)
    assert store["x"].grad is None


@pytest.mark.unit
def test_corrupted_backward_is_detected(mocker):
    """Test that a wrong backward rule produces a large relative error."""
    original = tensor_module.Sigmoid.backward

    def doubled(self, grad):
        return tuple(2.0 * g for g in original(self, grad))

    mocker.patch.object(tensor_module.Sigmoid, "backward", doubled)
    store = _store(x=np.array([0.1, -0.4]))
    report = grad_check_report(lambda p: sum_all(sigmoid(p["x"])), store)
    assert report.max_rel_error == pytest.approx(0.5, rel=1e-4)
    assert report.worst_path == "x"


@pytest.mark.unit
def test_gradcheck_cases_cover_every_block():
    assert set(gradcheck_cases()) == set(GRADCHECK_BLOCKS)


@pytest.mark.unit
def test_unknown_block_is_rejected():
    with pytest.raises(ContractError, match="unknown gradient check blocks"):
        run_gradcheck(["lstm"])


@pytest.mark.unit
@pytest.mark.parametrize("block", [b for b in GRADCHECK_BLOCKS if b != "full_model"])
def test_block_gradients_match_central_differences(block):
    """Test every EHAT and transformer block at d_k=8, M=6, N=5."""
    (result,) = run_gradcheck([block])
    assert result.result.checked > 0
    assert result.passed, f"{block}: {result.result.max_rel_error:.3e}"


@pytest.mark.integration
def test_full_model_gradient_matches_central_differences():
    """Test the CE loss of a one-layer decoder with EHAT at d_k=8."""
    (result,) = run_gradcheck(["full_model"])
    assert result.passed, f"max rel err {result.result.max_rel_error:.3e}"


@pytest.mark.unit
def test_report_marks_failures():
    blocks = run_gradcheck(["ffn"], tolerance=0.0)
    text = format_gradcheck_report(blocks)
    assert text.splitlines()[0].startswith("block")
    assert "FAIL" in text
    assert "ffn" in text
