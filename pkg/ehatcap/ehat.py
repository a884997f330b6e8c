#!/usr/bin/env python3
"""
Embedded heterogeneous attention: masked heterogeneous cross-attention (MHCA),
the heterogeneous attention reasoning network (HARN) in its prototype, shared-anchor
(v1) and cross-lingual (v2) forms, and heterogeneous co-attention (HCA).

MHCA maps a variable-length input to a d_k x d_k matrix. Inside the decoder the
language paths use the prefix form: one d_k x d_k block per position t, built from
rows <= t only and stacked into an (M*d_k) x d_k matrix. HARN works row-wise, so it
accepts either a single block or a stack; the visual anchor is always a single block
and is tiled to match.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ehatcap.attention import MaskSpec, build_mask
from ehatcap.errors import ConfigurationError, ContractError, DimensionError
from ehatcap.tensor import (
    MaskMul,
    ParameterStore,
    RngStream,
    Tensor,
    add,
    block_row_sum,
    concat_cols,
    dropout,
    glorot,
    matmul,
    mul,
    prefix_gram,
    reshape,
    scale,
    scale_rows,
    sigmoid,
    softmax_rows,
    sub,
    tensor,
    tile_rows,
    transpose,
)

HARN_VARIANTS = ("prototype", "v1", "v2")
MHCA_MODES = ("attention", "matmul")
HARN_WEIGHT_MODES = ("learned", "ones")
HARN_INPUT_MODES = ("concat", "scale")
HCA_MODES = ("gate", "matmul")


@dataclass
class MhcaParams:
    dropout_rate: float = 0.1
    mode: str = "attention"

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"MHCA dropout must lie in [0, 1), got {self.dropout_rate}")
        if self.mode not in MHCA_MODES:
            raise ConfigurationError(f"unknown MHCA mode '{self.mode}'")


@dataclass
class HcaParams:
    lam: float = 0.3
    mode: str = "gate"

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ConfigurationError(f"HCA gate must be non-negative, got {self.lam}")
        if self.mode not in HCA_MODES:
            raise ConfigurationError(f"unknown HCA mode '{self.mode}'")


@dataclass
class HeterogeneousWeights:
    """Per-row similarity weights, one column per language (d_k rows, or M*d_k when stacked)."""

    omega_e: Tensor
    omega_c: Tensor


# ===== MHCA =====


def _row_attention(
    x: Tensor, mask: MaskSpec, rate: float, mode: str, rng: Optional[RngStream]
) -> Tensor:
    """dropout(mask(softmax(X X^T / sqrt(d)))) X with padded query rows zeroed."""
    d = x.shape[1]
    scores = scale(matmul(x, transpose(x)), 1.0 / math.sqrt(d))
    if mask.shape != scores.shape:
        raise DimensionError(f"mask of shape {mask.shape} for {x.shape[0]} rows")
    if not mask.query_valid.any():
        raise ContractError(f"{mask.kind} mask leaves no valid row to project")
    starved = np.flatnonzero(mask.query_valid & ~mask.allowed.any(axis=1))
    if starved.size:
        raise ContractError(f"{mask.kind} mask leaves rows {starved.tolist()} with no valid key")
    att = softmax_rows(scores, mask.bias)
    if not mask.query_valid.all():
        keep = np.repeat(mask.query_valid[:, None], att.shape[1], axis=1).astype(np.float64)
        att = MaskMul.apply(att, mask=keep)
    att = dropout(att, rate, mode, rng.child("attention") if rng is not None else None)
    return matmul(att, x)


def _valid_rows(x: Tensor, mask: MaskSpec) -> Tensor:
    if mask.query_valid.all():
        return x
    keep = np.repeat(mask.query_valid[:, None], x.shape[1], axis=1).astype(np.float64)
    return MaskMul.apply(x, mask=keep)


def mhca_project(
    x: Tensor,
    mask: Optional[MaskSpec],
    rate: float = 0.1,
    mode: str = "eval",
    rng: Optional[RngStream] = None,
    attention_mode: str = "attention",
) -> Tensor:
    """
    Map R x d_k rows to one d_k x d_k space-aligned matrix.

    With attention_mode "matmul" the attention step is skipped and the result is the
    plain Gram matrix X^T X / sqrt(d_k) of the valid rows.
    """
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"mhca_project needs at least one row, got shape {x.shape}")
    if mask is None:
        mask = build_mask("padding", x.shape[0])
    d = x.shape[1]
    if attention_mode == "matmul":
        mixed = _valid_rows(x, mask)
    else:
        mixed = _row_attention(x, mask, rate, mode, rng)
    gram = scale(matmul(transpose(mixed), mixed), 1.0 / math.sqrt(d))
    return dropout(gram, rate, mode, rng.child("output") if rng is not None else None)


def mhca_project_prefix(
    x: Tensor,
    mask: MaskSpec,
    rate: float = 0.1,
    mode: str = "eval",
    rng: Optional[RngStream] = None,
    attention_mode: str = "attention",
) -> Tensor:
    """
    Causal MHCA: block t of the (M*d_k) x d_k result is the projection of rows <= t.

    `mask` must be causal (or combined causal+padding) so the attention step of row t
    only sees rows <= t.
    """
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"mhca_project_prefix needs at least one row, got {x.shape}")
    d = x.shape[1]
    if attention_mode == "matmul":
        mixed = _valid_rows(x, mask)
    else:
        mixed = _row_attention(x, mask, rate, mode, rng)
    stacked = prefix_gram(mixed, 1.0 / math.sqrt(d))
    return dropout(stacked, rate, mode, rng.child("output") if rng is not None else None)


def mhca(
    o: Tensor,
    e: Tensor,
    c: Tensor,
    masks: Tuple[Optional[MaskSpec], Optional[MaskSpec], Optional[MaskSpec]],
    params: MhcaParams,
    mode: str = "eval",
    rng: Optional[RngStream] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Project regions, language A and language B independently to d_k x d_k.

    `masks` is (regions, language A, language B); None gives padding over O and a
    causal mask over the language inputs.
    """
    if not o.shape[1] == e.shape[1] == c.shape[1]:
        raise DimensionError(f"MHCA inputs {o.shape}, {e.shape}, {c.shape} differ in d_k")
    o_mask, e_mask, c_mask = masks
    if e_mask is None:
        e_mask = build_mask("causal", e.shape[0])
    if c_mask is None:
        c_mask = build_mask("causal", c.shape[0])
    out = []
    for name, x, m in (("regions", o, o_mask), ("lang_a", e, e_mask), ("lang_b", c, c_mask)):
        sub_rng = rng.child("mhca", name) if rng is not None else None
        out.append(mhca_project(x, m, params.dropout_rate, mode, sub_rng, params.mode))
    return out[0], out[1], out[2]


# ===== HARN parameters =====


@dataclass
class HarnParams:
    """View of the HARN weights stored under `prefix` in a ParameterStore."""

    store: ParameterStore
    prefix: str
    variant: str
    weight_mode: str = "learned"
    input_mode: str = "concat"

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    @property
    def visual_paths(self) -> Tuple[str, ...]:
        return ("os",) if self.variant == "v1" else ("o1", "o2")

    def count(self) -> int:
        return self.store.count(self.prefix + ".")


def _fc(store: ParameterStore, prefix: str, fan_in: int, fan_out: int, rng: RngStream) -> None:
    store.add(f"{prefix}.W", glorot(rng.child(prefix, "W"), fan_in, fan_out))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def init_harn(
    store: ParameterStore,
    prefix: str,
    d_k: int,
    variant: str,
    rng: RngStream,
    weight_mode: str = "learned",
    input_mode: str = "concat",
    zero_init_output: bool = False,
) -> HarnParams:
    """
    Register HARN weights.

    Visual pathway j (o1/o2, or the single shared os in v1) owns the MLP that
    derives the anchor Ô_j, the inner projection of Γ_Oj and the scoring vector
    W_Oj. Each language owns Γ_X, the scoring vector W_X and the output MLP Γ^H_X.
    """
    if variant not in HARN_VARIANTS:
        raise ConfigurationError(f"unknown HARN variant '{variant}', expected {HARN_VARIANTS}")
    if weight_mode not in HARN_WEIGHT_MODES:
        raise ConfigurationError(f"unknown HARN weight mode '{weight_mode}'")
    if input_mode not in HARN_INPUT_MODES:
        raise ConfigurationError(f"unknown HARN input mode '{input_mode}'")

    params = HarnParams(store, prefix, variant, weight_mode, input_mode)
    for path in params.visual_paths:
        _fc(store, f"{prefix}.mlp_{path}", d_k, d_k, rng)
        _fc(store, f"{prefix}.gamma_{path}", d_k, d_k, rng)
        store.add(f"{prefix}.w_{path}", glorot(rng.child(prefix, "w", path), d_k, 1))
    out_fan_in = 2 * d_k if input_mode == "concat" else d_k
    for lang in ("e", "c"):
        _fc(store, f"{prefix}.gamma_{lang}", 2 * d_k, d_k, rng)
        store.add(f"{prefix}.w_{lang}", glorot(rng.child(prefix, "w", lang), d_k, 1))
        if zero_init_output:
            store.add(f"{prefix}.out_{lang}.W", np.zeros((out_fan_in, d_k)))
            store.add(f"{prefix}.out_{lang}.b", np.zeros(d_k))
        else:
            _fc(store, f"{prefix}.out_{lang}", out_fan_in, d_k, rng)
    return params


def _apply_fc(params: HarnParams, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _require_variant(params: HarnParams, variant: str) -> None:
    if params.variant != variant:
        raise ContractError(f"HARN weights are for variant '{params.variant}', not '{variant}'")


def _check_square(name: str, x: Tensor, d: int) -> None:
    if x.ndim != 2 or x.shape[1] != d or x.shape[0] % d:
        raise DimensionError(f"{name} must be d_k x d_k or stacked blocks of it, got {x.shape}")


# ===== HARN operations =====


def gamma_o(o_j: Tensor, params: HarnParams, path: str) -> Tensor:
    """softmax_rows(Ô_j W + b) Ô_j, the visual attention map of pathway `path`."""
    if o_j.ndim != 2 or o_j.shape[0] != o_j.shape[1]:
        raise DimensionError(f"gamma_o needs a square matrix, got {o_j.shape}")
    return matmul(softmax_rows(_apply_fc(params, f"gamma_{path}", o_j)), o_j)


def hetero_weight(
    x_hat: Tensor, o_j: Tensor, params: HarnParams, lang: str, path: str
) -> Tensor:
    """
    Similarity weight of language `lang` ("e" or "c") against visual pathway `path`.

    a = Γ_X([X̂, Ô_j]) W_X and b = Γ_Oj(Ô_j) W_Oj are per-row scores; the weight is
    exp(a) / (exp(a) + exp(b)) = sigmoid(a - b). Returns a column with one entry per
    row of X̂.
    """
    d = o_j.shape[1]
    _check_square("X̂", x_hat, d)
    blocks = x_hat.shape[0] // d
    if params.weight_mode == "ones":
        return tensor(np.ones((x_hat.shape[0], 1)))
    anchor = tile_rows(o_j, blocks)
    a = matmul(_apply_fc(params, f"gamma_{lang}", concat_cols(x_hat, anchor)), params[f"w_{lang}"])
    b = tile_rows(matmul(gamma_o(o_j, params, path), params[f"w_{path}"]), blocks)
    return sigmoid(sub(a, b))


def _visual_anchor(o_hat: Tensor, params: HarnParams, path: str) -> Tensor:
    return _apply_fc(params, f"mlp_{path}", o_hat)


def _output(params: HarnParams, lang: str, scaled: Tensor, other: Tensor) -> Tensor:
    """Γ^H_X over [other, ω ⊙ X̂], or over ω ⊙ X̂ (+ Ĉ or Ê in v2) in scale mode."""
    if params.input_mode == "concat":
        return _apply_fc(params, f"out_{lang}", concat_cols(other, scaled))
    if params.variant == "v2":
        return _apply_fc(params, f"out_{lang}", add(scaled, other))
    return _apply_fc(params, f"out_{lang}", scaled)


def harn_prototype(
    o_hat: Tensor, e_hat: Tensor, c_hat: Tensor, params: HarnParams
) -> Tuple[Tensor, Tensor, HeterogeneousWeights]:
    """Two visual pathways; Ẽ = Γ^H_E([Ê, ω_E ⊙ Ê]) and C̃ = Γ^H_C([Ĉ, ω_C ⊙ Ĉ])."""
    _require_variant(params, "prototype")
    o1 = _visual_anchor(o_hat, params, "o1")
    o2 = _visual_anchor(o_hat, params, "o2")
    omega_e = hetero_weight(e_hat, o1, params, "e", "o1")
    omega_c = hetero_weight(c_hat, o2, params, "c", "o2")
    e_tilde = _output(params, "e", scale_rows(e_hat, omega_e), e_hat)
    c_tilde = _output(params, "c", scale_rows(c_hat, omega_c), c_hat)
    return e_tilde, c_tilde, HeterogeneousWeights(omega_e, omega_c)


def harn_variant1(
    o_hat: Tensor, e_hat: Tensor, c_hat: Tensor, params: HarnParams
) -> Tuple[Tensor, Tensor, HeterogeneousWeights]:
    """One shared visual pathway Ô_s anchors both languages."""
    _require_variant(params, "v1")
    o_s = _visual_anchor(o_hat, params, "os")
    omega_e = hetero_weight(e_hat, o_s, params, "e", "os")
    omega_c = hetero_weight(c_hat, o_s, params, "c", "os")
    e_tilde = _output(params, "e", scale_rows(e_hat, omega_e), e_hat)
    c_tilde = _output(params, "c", scale_rows(c_hat, omega_c), c_hat)
    return e_tilde, c_tilde, HeterogeneousWeights(omega_e, omega_c)


def harn_variant2(
    o_hat: Tensor, e_hat: Tensor, c_hat: Tensor, params: HarnParams
) -> Tuple[Tensor, Tensor, HeterogeneousWeights]:
    """Cross-lingual form: Ẽ = Γ^H_E([ω_E ⊙ Ê, Ĉ]) and C̃ = Γ^H_C([ω_C ⊙ Ĉ, Ê])."""
    _require_variant(params, "v2")
    o1 = _visual_anchor(o_hat, params, "o1")
    o2 = _visual_anchor(o_hat, params, "o2")
    omega_e = hetero_weight(e_hat, o1, params, "e", "o1")
    omega_c = hetero_weight(c_hat, o2, params, "c", "o2")
    scaled_e = scale_rows(e_hat, omega_e)
    scaled_c = scale_rows(c_hat, omega_c)
    if params.input_mode == "concat":
        e_tilde = _apply_fc(params, "out_e", concat_cols(scaled_e, c_hat))
        c_tilde = _apply_fc(params, "out_c", concat_cols(scaled_c, e_hat))
    else:
        e_tilde = _output(params, "e", scaled_e, c_hat)
        c_tilde = _output(params, "c", scaled_c, e_hat)
    return e_tilde, c_tilde, HeterogeneousWeights(omega_e, omega_c)


def harn(
    o_hat: Tensor, e_hat: Tensor, c_hat: Tensor, params: HarnParams
) -> Tuple[Tensor, Tensor, HeterogeneousWeights]:
    """Dispatch to the variant the weights were built for."""
    if params.variant == "prototype":
        return harn_prototype(o_hat, e_hat, c_hat, params)
    if params.variant == "v1":
        return harn_variant1(o_hat, e_hat, c_hat, params)
    return harn_variant2(o_hat, e_hat, c_hat, params)


# ===== HCA =====


def hca_scores(e: Tensor, e_tilde: Tensor) -> Tensor:
    """
    Row t of E against its own block of Ẽ, scaled by 1/sqrt(d_k).

    A single d_k x d_k Ẽ is shared by every row; a stacked (M*d_k) x d_k Ẽ pairs
    row t with block t.
    """
    m, d = e.shape
    if e_tilde.shape == (d, d):
        return scale(matmul(e, e_tilde), 1.0 / math.sqrt(d))
    if e_tilde.shape != (m * d, d):
        raise DimensionError(f"HCA of E {e.shape} with Ẽ {e_tilde.shape}")
    per_row = scale_rows(e_tilde, reshape(e, (m * d, 1)))
    return scale(block_row_sum(per_row, d), 1.0 / math.sqrt(d))


def hca(e: Tensor, e_tilde: Tensor, lam: float) -> Tensor:
    """(1 + λ S) ⊙ E with S = softmax_rows(E Ẽ / sqrt(d_k))."""
    if lam < 0:
        raise ConfigurationError(f"HCA gate must be non-negative, got {lam}")
    s = softmax_rows(hca_scores(e, e_tilde))
    return mul(add(scale(s, lam), 1.0), e)


def hca_delta(
    e: Tensor,
    e_tilde: Tensor,
    params: HcaParams,
    trace: Optional[Dict[str, np.ndarray]] = None,
    name: str = "hca",
) -> Tensor:
    """
    Residual contribution of HCA, hca(E, Ẽ, λ) - E = λ S ⊙ E.

    In "matmul" mode the gate is replaced by the plain product E Ẽ / sqrt(d_k).
    """
    scores = hca_scores(e, e_tilde)
    if params.mode == "matmul":
        return scores
    s = softmax_rows(scores)
    if trace is not None:
        trace[name] = s.numpy()
    return mul(scale(s, params.lam), e)


# ===== Weight tying =====

_VISUAL_WEIGHTS = ("mlp_{}.W", "mlp_{}.b", "gamma_{}.W", "gamma_{}.b", "w_{}")


def tie_visual_pathways(params: HarnParams) -> None:
    """Share the o1 pathway weights with o2, so one visual anchor serves both languages."""
    if params.variant == "v1":
        raise ContractError("variant v1 has a single visual pathway already")
    for name in _VISUAL_WEIGHTS:
        params.store.tie(
            f"{params.prefix}.{name.format('o2')}", f"{params.prefix}.{name.format('o1')}"
        )


def shared_anchor_state(params: HarnParams, prefix: str) -> Dict[str, np.ndarray]:
    """
    v1 weights under `prefix` taken from prototype weights: the o1 pathway becomes the
    shared pathway and the language weights are copied unchanged.
    """
    _require_variant(params, "prototype")
    state: Dict[str, np.ndarray] = {}
    for path in params.store.paths(params.prefix + "."):
        name = path[len(params.prefix) + 1 :]
        if "o2" in name.split(".")[0]:
            continue
        target = name.replace("_o1", "_os") if name.split(".")[0].endswith("_o1") else name
        state[f"{prefix}.{target}"] = params.store[path].data.copy()
    return state
