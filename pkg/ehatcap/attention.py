#!/usr/bin/env python3
"""
Transformer building blocks: masks, scaled dot-product attention, multi-head
attention, the position-wise feed-forward sublayer, and the self/cross attention
used over the spliced [E, C] language block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ehatcap.errors import ConfigurationError, ContractError, DimensionError
from ehatcap.tensor import (
    ParameterStore,
    RngStream,
    Tensor,
    add,
    concat_cols,
    glorot,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

MASK_BIAS = -1e9
MASK_KINDS = ("causal", "padding", "combined", "block_causal")


@dataclass(frozen=True)
class MaskSpec:
    """
    Allowed query/key pairs of one attention call.

    `allowed[q, k]` says whether query q may attend to key k; `query_valid[q]` marks
    query rows that belong to real (non-padded) positions.
    """

    kind: str
    allowed: np.ndarray
    query_valid: np.ndarray

    @property
    def bias(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_BIAS)

    @property
    def shape(self) -> tuple:
        return tuple(self.allowed.shape)

    def combine(self, other: "MaskSpec") -> "MaskSpec":
        if self.shape != other.shape:
            raise DimensionError(f"cannot combine masks of shape {self.shape} and {other.shape}")
        return MaskSpec(
            kind="combined",
            allowed=self.allowed & other.allowed,
            query_valid=self.query_valid & other.query_valid,
        )


def _valid(length: int, valid_length: Optional[int]) -> np.ndarray:
    n = length if valid_length is None else valid_length
    if not 0 <= n <= length:
        raise ConfigurationError(f"valid length {n} outside [0, {length}]")
    return np.arange(length) < n


def build_mask(
    kind: str,
    length: int,
    valid_length: Optional[int] = None,
    queries: Optional[int] = None,
    valid_length_b: Optional[int] = None,
) -> MaskSpec:
    """
    Build a deterministic attention mask.

    Args:
        kind: causal, padding, combined (causal AND padding) or block_causal
        length: number of keys (for block_causal: positions per language block)
        valid_length: keys at positions >= valid_length are padding
        queries: number of query rows for padding masks over a different sequence
            (cross attention); defaults to `length`
        valid_length_b: padding boundary of the second block (block_causal only)
    """
    if kind not in MASK_KINDS:
        raise ConfigurationError(f"unknown mask kind '{kind}', expected one of {MASK_KINDS}")
    if length < 1:
        raise ConfigurationError(f"mask length must be positive, got {length}")

    if kind == "block_causal":
        valid_a = _valid(length, valid_length)
        valid_b = _valid(length, valid_length_b)
        causal = np.tril(np.ones((length, length), dtype=bool))
        causal2 = np.tile(causal, (2, 2))
        keys = np.concatenate([valid_a, valid_b])
        return MaskSpec(kind, causal2 & keys[None, :], keys.copy())

    valid = _valid(length, valid_length)
    if kind == "causal":
        allowed = np.tril(np.ones((length, length), dtype=bool))
        return MaskSpec(kind, allowed, np.ones(length, dtype=bool))
    if kind == "padding":
        rows = length if queries is None else queries
        allowed = np.repeat(valid[None, :], rows, axis=0)
        query_valid = valid.copy() if queries is None else np.ones(rows, dtype=bool)
        return MaskSpec(kind, allowed, query_valid)
    causal = build_mask("causal", length)
    padding = build_mask("padding", length, valid_length)
    return causal.combine(padding)


def _check_mask(mask: MaskSpec, rows: int, cols: int) -> None:
    if mask.shape != (rows, cols):
        raise DimensionError(f"mask of shape {mask.shape} for scores of shape {(rows, cols)}")
    if not mask.query_valid.any():
        raise ContractError(f"{mask.kind} mask has no valid query")
    starved = np.flatnonzero(mask.query_valid & ~mask.allowed.any(axis=1))
    if starved.size:
        raise ContractError(f"{mask.kind} mask leaves rows {starved.tolist()} with no valid key")


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Optional[MaskSpec] = None
) -> Tensor:
    """softmax(Q K^T / sqrt(d) + mask bias) V."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"query {q.shape} and key {k.shape} must share the last dimension")
    if v.ndim != 2 or k.shape[0] != v.shape[0]:
        raise DimensionError(f"key {k.shape} and value {v.shape} must share the first dimension")
    bias = None
    if mask is not None:
        _check_mask(mask, q.shape[0], k.shape[0])
        bias = mask.bias
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax_rows(scores, bias), v)


# ===== Multi-head attention =====


@dataclass
class MultiHeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, heads: int) -> "MultiHeadParams":
        return cls(
            w_q=store[f"{prefix}.w_q"],
            w_k=store[f"{prefix}.w_k"],
            w_v=store[f"{prefix}.w_v"],
            w_o=store[f"{prefix}.w_o"],
            heads=heads,
        )


def init_multi_head(
    store: ParameterStore, prefix: str, d_model: int, heads: int, rng: RngStream
) -> MultiHeadParams:
    """Register W_Q, W_K, W_V (d_model x h*d_k) and W_O (h*d_k x d_model) under `prefix`."""
    if heads < 1 or d_model % heads:
        raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
    for name in ("w_q", "w_k", "w_v", "w_o"):
        store.add(f"{prefix}.{name}", glorot(rng.child(prefix, name), d_model, d_model))
    return MultiHeadParams.from_store(store, prefix, heads)


def multi_head(
    q: Tensor, k: Tensor, v: Tensor, params: MultiHeadParams, mask: Optional[MaskSpec] = None
) -> Tensor:
    qp = matmul(q, params.w_q)
    kp = matmul(k, params.w_k)
    vp = matmul(v, params.w_v)
    if params.heads == 1:
        return matmul(scaled_dot_attention(qp, kp, vp, mask), params.w_o)
    d_k = params.d_k
    outputs: List[Tensor] = []
    for h in range(params.heads):
        lo, hi = h * d_k, (h + 1) * d_k
        outputs.append(
            scaled_dot_attention(
                slice_cols(qp, lo, hi), slice_cols(kp, lo, hi), slice_cols(vp, lo, hi), mask
            )
        )
    return matmul(concat_cols(*outputs), params.w_o)


# ===== Feed-forward =====


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> "FfnParams":
        return cls(
            w1=store[f"{prefix}.w1"],
            b1=store[f"{prefix}.b1"],
            w2=store[f"{prefix}.w2"],
            b2=store[f"{prefix}.b2"],
        )


def init_ffn(
    store: ParameterStore, prefix: str, d_model: int, d_ff: int, rng: RngStream
) -> FfnParams:
    store.add(f"{prefix}.w1", glorot(rng.child(prefix, "w1"), d_model, d_ff))
    store.add(f"{prefix}.b1", np.zeros(d_ff))
    store.add(f"{prefix}.w2", glorot(rng.child(prefix, "w2"), d_ff, d_model))
    store.add(f"{prefix}.b2", np.zeros(d_model))
    return FfnParams.from_store(store, prefix)


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    """max(0, X W1 + b1) W2 + b2."""
    hidden = relu(add(matmul(x, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)


# ===== Language-block attention =====


def self_attend_language(l: Tensor, params: MultiHeadParams, mask: MaskSpec) -> Tensor:
    """Multi-head self attention over the spliced [E, C] block (2M rows)."""
    if l.shape[0] % 2:
        raise DimensionError(f"spliced language block needs an even row count, got {l.shape}")
    return multi_head(l, l, l, params, mask)


def cross_attend(
    l: Tensor, o: Tensor, params: MultiHeadParams, mask: Optional[MaskSpec] = None
) -> Tensor:
    """Language rows attend to region features O (K = V = O)."""
    if mask is None:
        mask = build_mask("padding", o.shape[0], queries=l.shape[0])
    return multi_head(l, o, o, params, mask)
