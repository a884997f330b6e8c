#!/usr/bin/env python3
"""
Bilingual caption decoder.

The two language streams are spliced into one [E, C] block of 2M rows. Every layer
runs pre-norm residual sublayers: block-causal self attention, cross attention to the
region features, the EHAT block (MHCA -> HARN -> HCA) and the feed-forward sublayer.
Two generators map the final E and C rows to their vocabularies.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ehatcap.attention import (
    FfnParams,
    MaskSpec,
    MultiHeadParams,
    build_mask,
    cross_attend,
    ffn,
    init_ffn,
    init_multi_head,
    self_attend_language,
)
from ehatcap.corpus import BOS, EOS, PAD
from ehatcap.ehat import (
    HARN_INPUT_MODES,
    HARN_VARIANTS,
    HARN_WEIGHT_MODES,
    HCA_MODES,
    MHCA_MODES,
    HarnParams,
    HcaParams,
    harn,
    hca_delta,
    init_harn,
    mhca_project,
    mhca_project_prefix,
)
from ehatcap.errors import ConfigurationError, DataError
from ehatcap.persistence import load_checkpoint, save_checkpoint
from ehatcap.tensor import (
    ParameterStore,
    RngStream,
    Tensor,
    add,
    concat_rows,
    dropout,
    embedding,
    glorot,
    layer_norm,
    matmul,
    no_grad,
    slice_rows,
)

PLACEMENTS = ("every_layer", "top")
BLOCKED_TOKENS = (PAD, BOS)
BLOCKED_LOGIT = -1e9
Trace = Dict[str, np.ndarray]


@dataclass
class DecoderConfig:
    d_model: int = 512
    layers: int = 6
    heads: int = 8
    d_ff: Optional[int] = None
    max_len: int = 20
    lam: float = 0.3
    harn_variant: str = "prototype"
    dropout: float = 0.1
    vocab_a: int = 16
    vocab_b: int = 16
    use_ehat: bool = True
    ehat_placement: str = "every_layer"
    mhca_mode: str = "attention"
    harn_weight: str = "learned"
    harn_input: str = "concat"
    hca_mode: str = "gate"
    zero_init_harn_output: bool = False
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigurationError(f"decoder.layers must be >= 1, got {self.layers}")
        if self.max_len < 1:
            raise ConfigurationError(f"decoder.max_len must be >= 1, got {self.max_len}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(
                f"decoder.d_model={self.d_model} is not divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"decoder.dropout must lie in [0, 1), got {self.dropout}")
        if self.lam < 0:
            raise ConfigurationError(f"decoder.lam must be >= 0, got {self.lam}")
        if min(self.vocab_a, self.vocab_b) <= EOS + 1:
            raise ConfigurationError("vocabularies need at least one token beyond the reserved ids")
        choices = {
            "harn_variant": HARN_VARIANTS,
            "ehat_placement": PLACEMENTS,
            "mhca_mode": MHCA_MODES,
            "harn_weight": HARN_WEIGHT_MODES,
            "harn_input": HARN_INPUT_MODES,
            "hca_mode": HCA_MODES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(
                    f"decoder.{name}={getattr(self, name)!r} is not one of {allowed}"
                )

    @property
    def d_k(self) -> int:
        return self.d_model

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d_model

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "DecoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"unknown decoder keys: {unknown}")
        return cls(**payload)


@dataclass
class DecoderLayer:
    prefix: str
    self_attn: MultiHeadParams
    cross_attn: MultiHeadParams
    ffn: FfnParams
    norms: Dict[str, Tuple[Tensor, Tensor]]
    harn: Optional[HarnParams]


@dataclass
class DecoderMasks:
    block: MaskSpec
    lang_a: MaskSpec
    lang_b: MaskSpec
    regions: MaskSpec
    cross: MaskSpec


class EhatDecoder:
    """Decoder configuration plus its parameter store."""

    def __init__(self, config: DecoderConfig, store: Optional[ParameterStore] = None) -> None:
        self.config = config
        self.params = store if store is not None else ParameterStore()
        if store is None:
            self._init_params(RngStream(config.seed).child("init"))
        self.layers = [self._layer(i) for i in range(config.layers)]
        self.top_harn = self._harn_view("top_ehat") if self._has_top_ehat else None

    @property
    def _has_layer_ehat(self) -> bool:
        return self.config.use_ehat and self.config.ehat_placement == "every_layer"

    @property
    def _has_top_ehat(self) -> bool:
        return self.config.use_ehat and self.config.ehat_placement == "top"

    def _add_norm(self, path: str) -> None:
        self.params.add(f"{path}.g", np.ones(self.config.d_model))
        self.params.add(f"{path}.b", np.zeros(self.config.d_model))

    def _init_ehat(self, prefix: str, rng: RngStream) -> None:
        cfg = self.config
        self._add_norm(f"{prefix}.ln")
        init_harn(
            self.params,
            f"{prefix}.harn",
            cfg.d_model,
            cfg.harn_variant,
            rng,
            weight_mode=cfg.harn_weight,
            input_mode=cfg.harn_input,
            zero_init_output=cfg.zero_init_harn_output,
        )

    def _init_params(self, rng: RngStream) -> None:
        cfg = self.config
        d = cfg.d_model
        self.params.add("embed.a", rng.child("embed.a").normal((cfg.vocab_a, d)))
        self.params.add("embed.b", rng.child("embed.b").normal((cfg.vocab_b, d)))
        for i in range(cfg.layers):
            prefix = f"layers.{i}"
            self._add_norm(f"{prefix}.ln1")
            init_multi_head(self.params, f"{prefix}.self_attn", d, cfg.heads, rng)
            self._add_norm(f"{prefix}.ln2")
            init_multi_head(self.params, f"{prefix}.cross_attn", d, cfg.heads, rng)
            if self._has_layer_ehat:
                self._init_ehat(f"{prefix}.ehat", rng)
            self._add_norm(f"{prefix}.ln4")
            init_ffn(self.params, f"{prefix}.ffn", d, cfg.ff_width, rng)
        if self._has_top_ehat:
            self._init_ehat("top_ehat", rng)
        self._add_norm("final_ln")
        for lang, size in (("a", cfg.vocab_a), ("b", cfg.vocab_b)):
            self.params.add(f"generator.{lang}.W", glorot(rng.child("generator", lang), d, size))
            self.params.add(f"generator.{lang}.b", np.zeros(size))

    def norm(self, path: str) -> Tuple[Tensor, Tensor]:
        return self.params[f"{path}.g"], self.params[f"{path}.b"]

    def _harn_view(self, prefix: str) -> HarnParams:
        cfg = self.config
        return HarnParams(
            self.params, f"{prefix}.harn", cfg.harn_variant, cfg.harn_weight, cfg.harn_input
        )

    def _layer(self, i: int) -> DecoderLayer:
        prefix = f"layers.{i}"
        norms = {name: self.norm(f"{prefix}.{name}") for name in ("ln1", "ln2", "ln4")}
        has_ehat = self._has_layer_ehat
        if has_ehat:
            norms["ln3"] = self.norm(f"{prefix}.ehat.ln")
        return DecoderLayer(
            prefix=prefix,
            self_attn=MultiHeadParams.from_store(
                self.params, f"{prefix}.self_attn", self.config.heads
            ),
            cross_attn=MultiHeadParams.from_store(
                self.params, f"{prefix}.cross_attn", self.config.heads
            ),
            ffn=FfnParams.from_store(self.params, f"{prefix}.ffn"),
            norms=norms,
            harn=self._harn_view(f"{prefix}.ehat") if has_ehat else None,
        )


# ===== Embeddings and masks =====


@lru_cache(maxsize=32)
def _sinusoid(length: int, d: int, offset: int) -> np.ndarray:
    positions = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2, dtype=np.float64) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d // 2])
    table.setflags(write=False)
    return table


def positional_encoding(length: int, d: int, offset: int = 0) -> np.ndarray:
    """Sinusoidal positions offset..offset+length-1 (rows) over d channels."""
    return _sinusoid(length, d, offset)


def embed_and_position(tokens: Sequence[int], table: Tensor, t_offset: int = 0) -> Tensor:
    """Embedding lookup plus the sinusoidal signal of positions t_offset, t_offset+1, ..."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise DataError(f"expected a non-empty id sequence, got shape {ids.shape}")
    vocab = table.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        bad_ids = sorted(set(bad.tolist()))
        raise DataError(f"token ids {bad_ids} out of range for vocabulary {vocab}")
    pe = positional_encoding(ids.size, table.shape[1], t_offset)
    return add(embedding(table, ids), Tensor(pe))


def valid_length(tokens: Sequence[int]) -> int:
    """Number of leading non-PAD tokens; PAD may only appear as trailing padding."""
    ids = list(tokens)
    n = len(ids)
    for i, token in enumerate(ids):
        if token == PAD:
            n = i
            break
    if any(token != PAD for token in ids[n:]):
        raise DataError(f"PAD inside a token sequence: {ids}")
    return n


def build_decoder_masks(
    inputs_a: Sequence[int],
    inputs_b: Sequence[int],
    n_regions: int,
    n_valid_regions: Optional[int] = None,
) -> DecoderMasks:
    m = len(inputs_a)
    len_a, len_b = valid_length(inputs_a), valid_length(inputs_b)
    return DecoderMasks(
        block=build_mask("block_causal", m, len_a, valid_length_b=len_b),
        lang_a=build_mask("combined", m, len_a),
        lang_b=build_mask("combined", m, len_b),
        regions=build_mask("padding", n_regions, n_valid_regions),
        cross=build_mask("padding", n_regions, n_valid_regions, queries=2 * m),
    )


# ===== Forward =====


def _drop(
    x: Tensor, config: DecoderConfig, mode: str, rng: Optional[RngStream], name: str
) -> Tensor:
    return dropout(x, config.dropout, mode, rng.child(name) if rng is not None else None)


def ehat_block(
    h: Tensor,
    o: Tensor,
    harn_params: HarnParams,
    masks: DecoderMasks,
    config: DecoderConfig,
    mode: str = "eval",
    rng: Optional[RngStream] = None,
    trace: Optional[Trace] = None,
    name: str = "ehat",
) -> Tensor:
    """
    EHAT contribution to the residual stream of a normalised [E, C] block.

    Returns the concatenation of hca(E) - E and hca(C) - C, computed with causal
    (prefix) MHCA on both language paths.
    """
    m = h.shape[0] // 2
    d = h.shape[1]
    e = slice_rows(h, 0, m)
    c = slice_rows(h, m, 2 * m)

    def sub_rng(label: str) -> Optional[RngStream]:
        return rng.child(name, label) if rng is not None else None

    rate = config.dropout
    o_hat = mhca_project(o, masks.regions, rate, mode, sub_rng("regions"), config.mhca_mode)
    e_hat = mhca_project_prefix(e, masks.lang_a, rate, mode, sub_rng("lang_a"), config.mhca_mode)
    c_hat = mhca_project_prefix(c, masks.lang_b, rate, mode, sub_rng("lang_b"), config.mhca_mode)
    e_tilde, c_tilde, weights = harn(o_hat, e_hat, c_hat, harn_params)

    hca_params = HcaParams(config.lam, config.hca_mode)
    delta_e = hca_delta(e, e_tilde, hca_params, trace, f"{name}.hca_a")
    delta_c = hca_delta(c, c_tilde, hca_params, trace, f"{name}.hca_b")
    if trace is not None:
        trace[f"{name}.omega_a"] = weights.omega_e.numpy().reshape(m, d)
        trace[f"{name}.omega_b"] = weights.omega_c.numpy().reshape(m, d)
    return concat_rows(delta_e, delta_c)


def decoder_layer_forward(
    l: Tensor,
    o: Tensor,
    layer: DecoderLayer,
    masks: DecoderMasks,
    config: DecoderConfig,
    mode: str = "eval",
    rng: Optional[RngStream] = None,
    trace: Optional[Trace] = None,
) -> Tensor:
    eps = config.ln_eps
    layer_rng = rng.child(layer.prefix) if rng is not None else None

    x = l
    h = layer_norm(x, *layer.norms["ln1"], eps=eps)
    attended = self_attend_language(h, layer.self_attn, masks.block)
    x = add(x, _drop(attended, config, mode, layer_rng, "self"))
    h = layer_norm(x, *layer.norms["ln2"], eps=eps)
    attended = cross_attend(h, o, layer.cross_attn, masks.cross)
    x = add(x, _drop(attended, config, mode, layer_rng, "cross"))
    if layer.harn is not None:
        h = layer_norm(x, *layer.norms["ln3"], eps=eps)
        delta = ehat_block(h, o, layer.harn, masks, config, mode, layer_rng, trace, layer.prefix)
        x = add(x, _drop(delta, config, mode, layer_rng, "ehat"))
    h = layer_norm(x, *layer.norms["ln4"], eps=eps)
    return add(x, _drop(ffn(h, layer.ffn), config, mode, layer_rng, "ffn"))


def decoder_forward(
    model: EhatDecoder,
    o: Tensor,
    inputs_a: Sequence[int],
    inputs_b: Sequence[int],
    mode: str = "eval",
    rng: Optional[RngStream] = None,
    trace: Optional[Trace] = None,
    n_valid_regions: Optional[int] = None,
) -> Tuple[Tensor, Tensor]:
    """Logits for already BOS-shifted input sequences of equal length."""
    cfg = model.config
    if o.ndim != 2 or o.shape[1] != cfg.d_model:
        raise DataError(f"region features {o.shape} do not match d_model={cfg.d_model}")
    if len(inputs_a) != len(inputs_b):
        raise DataError(f"input lengths differ: {len(inputs_a)} vs {len(inputs_b)}")
    m = len(inputs_a)
    masks = build_decoder_masks(inputs_a, inputs_b, o.shape[0], n_valid_regions)

    x = concat_rows(
        embed_and_position(inputs_a, model.params["embed.a"]),
        embed_and_position(inputs_b, model.params["embed.b"]),
    )
    x = _drop(x, cfg, mode, rng, "embed")
    for layer in model.layers:
        x = decoder_layer_forward(x, o, layer, masks, cfg, mode, rng, trace)
    if model.top_harn is not None:
        h = layer_norm(x, *model.norm("top_ehat.ln"), eps=cfg.ln_eps)
        delta = ehat_block(h, o, model.top_harn, masks, cfg, mode, rng, trace, "top_ehat")
        x = add(x, _drop(delta, cfg, mode, rng, "top_ehat"))

    h = layer_norm(x, *model.norm("final_ln"), eps=cfg.ln_eps)
    p = model.params
    logits_a = add(matmul(slice_rows(h, 0, m), p["generator.a.W"]), p["generator.a.b"])
    logits_b = add(matmul(slice_rows(h, m, 2 * m), p["generator.b.W"]), p["generator.b.b"])
    return logits_a, logits_b


def shift_right(targets: Sequence[int]) -> List[int]:
    return [BOS] + [int(t) for t in targets[:-1]]


def pad_pair(ids_a: Sequence[int], ids_b: Sequence[int]) -> Tuple[List[int], List[int]]:
    """Right-pad two id sequences with PAD to a common length."""
    m = max(len(ids_a), len(ids_b))
    return (
        list(ids_a) + [PAD] * (m - len(ids_a)),
        list(ids_b) + [PAD] * (m - len(ids_b)),
    )


def forward_teacher_forced(
    model: EhatDecoder,
    o: Tensor,
    targets_a: Sequence[int],
    targets_b: Sequence[int],
    mode: str = "eval",
    rng: Optional[RngStream] = None,
    trace: Optional[Trace] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Per-position logits for right-padded targets of equal length M.

    Position t is predicted from BOS plus the targets before t in both languages.
    """
    if len(targets_a) != len(targets_b):
        raise DataError(f"target lengths differ: {len(targets_a)} vs {len(targets_b)}")
    if len(targets_a) > model.config.max_len:
        raise DataError(f"targets of length {len(targets_a)} exceed max_len={model.config.max_len}")
    inputs_a, inputs_b = shift_right(targets_a), shift_right(targets_b)
    return decoder_forward(model, o, inputs_a, inputs_b, mode, rng, trace)


# ===== Decoding =====


@dataclass
class DecodeResult:
    """Lockstep output: one id per step per language (PAD after that language's EOS)."""

    tokens_a: List[int]
    tokens_b: List[int]
    logprobs_a: List[float]
    logprobs_b: List[float]

    @property
    def steps(self) -> int:
        return len(self.tokens_a)


def blocked_logit_offset(vocab_size: int) -> np.ndarray:
    """Additive logit row that removes PAD and BOS from the decoding distribution."""
    offset = np.zeros(vocab_size)
    offset[list(BLOCKED_TOKENS)] = BLOCKED_LOGIT
    return offset


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


def _choose(
    row: np.ndarray, rng: Optional[RngStream], temperature: float
) -> Tuple[int, float]:
    logp = _log_softmax(row + blocked_logit_offset(row.shape[0]))
    if rng is None or temperature <= 0.0:
        token = int(np.argmax(logp))
    else:
        scaled = logp / temperature
        probs = np.exp(scaled - scaled.max())
        token = rng.categorical(probs)
    return token, float(logp[token])


def _lockstep(
    model: EhatDecoder,
    o: Tensor,
    rng: Optional[RngStream],
    temperature: float,
    max_len: Optional[int],
    trace: Optional[List[Tuple[str, int, np.ndarray]]],
) -> DecodeResult:
    steps = model.config.max_len if max_len is None else min(max_len, model.config.max_len)
    out = DecodeResult([], [], [], [])
    done_a = done_b = False
    with no_grad():
        for t in range(steps):
            step_trace: Optional[Trace] = {} if trace is not None else None
            logits_a, logits_b = decoder_forward(
                model, o, [BOS] + out.tokens_a, [BOS] + out.tokens_b, "eval", None, step_trace
            )
            for lang, logits, done in (("a", logits_a, done_a), ("b", logits_b, done_b)):
                if done:
                    token, logp = PAD, 0.0
                else:
                    token, logp = _choose(logits.data[-1], rng, temperature)
                getattr(out, f"tokens_{lang}").append(token)
                getattr(out, f"logprobs_{lang}").append(logp)
            done_a = done_a or out.tokens_a[-1] == EOS
            done_b = done_b or out.tokens_b[-1] == EOS
            if trace is not None and step_trace is not None:
                trace.extend((name, t, matrix) for name, matrix in sorted(step_trace.items()))
            if done_a and done_b:
                break
    return out


def greedy_decode(
    model: EhatDecoder,
    o: Tensor,
    max_len: Optional[int] = None,
    trace: Optional[List[Tuple[str, int, np.ndarray]]] = None,
) -> DecodeResult:
    """
    Lockstep argmax decoding of both languages.

    A language that emits EOS is frozen to PAD while the other continues; decoding
    stops when both are finished or after max_len steps. `trace`, when given, collects
    (name, step, matrix) for every ω column and HCA weight matrix.
    """
    return _lockstep(model, o, None, 0.0, max_len, trace)


def sample_decode(
    model: EhatDecoder,
    o: Tensor,
    rng: RngStream,
    temperature: float = 1.0,
    max_len: Optional[int] = None,
) -> DecodeResult:
    """
    Lockstep multinomial sampling.

    Log-probs are under the untempered model with PAD and BOS excluded, the same
    distribution `training.sequence_logprob` re-scores.
    """
    return _lockstep(model, o, rng, temperature, max_len, None)


# ===== Parameters and checkpoints =====


def count_parameters(model: EhatDecoder) -> Dict[str, int]:
    """Exact parameter counts per block: base decoder, EHAT, embeddings, generators."""
    store = model.params
    counts: Dict[str, int] = {}
    base_total = 0
    ehat_total = store.count("top_ehat.")
    for i in range(model.config.layers):
        ehat_i = store.count(f"layers.{i}.ehat.")
        base_i = store.count(f"layers.{i}.") - ehat_i
        counts[f"layers.{i}.base"] = base_i
        counts[f"layers.{i}.ehat"] = ehat_i
        base_total += base_i
        ehat_total += ehat_i
    counts["embedding"] = store.count("embed.")
    counts["base"] = base_total + store.count("final_ln.")
    counts["ehat"] = ehat_total
    counts["generator"] = store.count("generator.")
    counts["total"] = store.count()
    return counts


def save_model(model: EhatDecoder, path: str, header: Optional[Dict[str, Any]] = None) -> None:
    meta = {"decoder": model.config.to_dict()}
    meta.update(header or {})
    save_checkpoint(path, model.params.state_dict(), meta)


def load_model(path: str) -> Tuple[EhatDecoder, Dict[str, Any]]:
    """Rebuild a decoder from a self-describing checkpoint."""
    arrays, header = load_checkpoint(path)
    if "decoder" not in header:
        raise DataError(f"{path} has no decoder configuration header")
    model = EhatDecoder(DecoderConfig.from_dict(header["decoder"]))
    model.params.load_state_dict(arrays)
    return model, header
