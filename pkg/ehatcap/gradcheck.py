#!/usr/bin/env python3
"""
Central-difference gradient checking against the autodiff engine.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from ehatcap.errors import ContractError
from ehatcap.tensor import ParameterStore, Tensor, no_grad, record_relu_patterns

GraphBuilder = Callable[[ParameterStore], Tensor]


@dataclass
class GradCheckResult:
    """Outcome of one gradient check."""

    max_rel_error: float
    worst_path: Optional[str]
    checked: int
    skipped_kinks: int


def _evaluate(builder: GraphBuilder, params: ParameterStore) -> Tuple[float, List[bytes]]:
    with no_grad(), record_relu_patterns() as patterns:
        loss = builder(params)
    if loss.shape != ():
        raise ContractError(f"graph builder must return a scalar loss, got shape {loss.shape}")
    return float(loss.data), list(patterns)


def grad_check_report(
    builder: GraphBuilder,
    params: ParameterStore,
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckResult:
    """
    Compare analytic gradients of `builder(params)` with central differences.

    The relative error of one entry is |a - n| / max(|a|, |n|, floor). Entries whose
    +eps and -eps evaluations switch any relu between active and inactive sit on a
    kink; they are counted in `skipped_kinks` and left out of the maximum.

    Args:
        builder: deterministically builds a scalar loss from the parameters
        params: parameters to perturb (each tensor at most once, so tied tensors are
            checked through their first path)
        eps: central-difference step
        floor: denominator floor

    Raises:
        ContractError: the builder gives different losses on two evaluations
    """
    first, _ = _evaluate(builder, params)
    second, _ = _evaluate(builder, params)
    if first != second:
        raise ContractError(
            f"graph builder is not deterministic: {first!r} != {second!r} on identical inputs"
        )

    params.zero_grad()
    builder(params).backward()

    worst = 0.0
    worst_path: Optional[str] = None
    checked = 0
    skipped = 0
    seen: set[int] = set()
    for path, param in params.items():
        if id(param) in seen:
            continue
        seen.add(id(param))
        analytic = param.grad if param.grad is not None else np.zeros(param.shape)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus, plus_pattern = _evaluate(builder, params)
            flat[i] = original - eps
            minus, minus_pattern = _evaluate(builder, params)
            flat[i] = original
            if plus_pattern != minus_pattern:
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_path = err, path
    params.zero_grad()
    return GradCheckResult(
        max_rel_error=worst, worst_path=worst_path, checked=checked, skipped_kinks=skipped
    )


def grad_check(
    builder: GraphBuilder, params: ParameterStore, eps: float = 1e-5, floor: float = 1e-8
) -> float:
    """Maximum relative gradient error over every parameter entry."""
    return grad_check_report(builder, params, eps=eps, floor=floor).max_rel_error
