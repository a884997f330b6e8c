#!/usr/bin/env python3
"""
Two-stage training: cross-entropy with teacher forcing, then self-critical sequence
training (SCST) with a leave-one-out baseline over K sampled caption pairs.

Run directory layout written by `Trainer`:
    checkpoints/<stage>_step<NNNNNN>.ckpt   evaluation checkpoints
    checkpoints/<stage>_diverged_step<N>.ckpt   diagnostic checkpoint on divergence
    ledger.db                               sqlite checkpoint ledger
    metrics.jsonl                           one record per step and per evaluation
    lr_table.txt                            RL stage: metrics at every lr change point
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ehatcap.corpus import PAD, CaptionCorpus, CorpusRecord
from ehatcap.decoder import (
    EhatDecoder,
    blocked_logit_offset,
    forward_teacher_forced,
    greedy_decode,
    load_model,
    pad_pair,
    sample_decode,
    save_model,
)
from ehatcap.errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DivergenceError,
    NumericalError,
)
from ehatcap.metrics import CiderCorpusStats, MetricTable, cider_d, corpus_eval, format_cell
from ehatcap.persistence import (
    LedgerEntry,
    append_metrics,
    best_checkpoint,
    init_ledger,
    record_checkpoint,
)
from ehatcap.tensor import (
    ParameterStore,
    RngStream,
    Tensor,
    add,
    backward,
    gather,
    log_softmax_rows,
    mul,
    no_grad,
    scale,
    sum_all,
    tensor,
)
from ehatcap.utils import ensure_dir, format_seconds, log

STAGES = ("ce", "rl")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    stage: str = "ce"
    epochs: int = 10
    max_steps: Optional[int] = None
    batch_size: int = 10
    warmup_steps: int = 20000
    peak_lr: float = 1e-4
    post_warmup_lr: Optional[float] = None
    rl_lr: float = 1e-5
    rl_decay: float = 0.1
    rl_decay_every: int = 5
    min_lr: float = 1e-7
    sample_count: int = 5
    temperature: float = 1.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    eval_interval: int = 3000
    eval_split: str = "val"
    eval_limit: Optional[int] = None
    init_from: Optional[str] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigurationError(f"train.stage must be one of {STAGES}, got {self.stage!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(
                f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if self.warmup_steps < 1:
            raise ConfigurationError(f"train.warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.sample_count < 2:
            raise ConfigurationError(
                f"train.sample_count must be >= 2 for a leave-one-out baseline, "
                f"got {self.sample_count}"
            )
        if self.batch_size < 1 or self.epochs < 1 or self.eval_interval < 1:
            raise ConfigurationError("train.batch_size, epochs and eval_interval must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError(f"train.max_steps must be >= 1, got {self.max_steps}")
        if self.rl_decay_every < 1:
            raise ConfigurationError(
                f"train.rl_decay_every must be >= 1, got {self.rl_decay_every}"
            )
        if self.clip_norm <= 0:
            raise ConfigurationError(f"train.clip_norm must be positive, got {self.clip_norm}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"unknown train keys: {unknown}")
        return cls(**payload)


# ===== Losses =====


def _token_nll(logits: Tensor, targets: Sequence[int], lang: str) -> Tensor:
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise DataError(f"language {lang}: logits {logits.shape} for {len(targets)} targets")
    keep = np.array([t != PAD for t in targets], dtype=np.float64)
    n = int(keep.sum())
    if n == 0:
        raise ContractError(f"language {lang} target is all PAD")
    picked = gather(log_softmax_rows(logits), list(targets))
    return scale(sum_all(mul(picked, tensor(keep))), -1.0 / n)


def ce_loss(
    logits_a: Tensor,
    logits_b: Tensor,
    targets_a: Sequence[int],
    targets_b: Sequence[int],
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Cross-entropy of both languages, each normalised per non-PAD target token.

    Returns (total, loss_a, loss_b) with total = loss_a + loss_b.
    """
    loss_a = _token_nll(logits_a, targets_a, "A")
    loss_b = _token_nll(logits_b, targets_b, "B")
    return add(loss_a, loss_b), loss_a, loss_b


def _accuracy_counts(logits: Tensor, targets: Sequence[int]) -> Tuple[int, int]:
    predicted = np.argmax(logits.data, axis=1)
    keep = np.array([t != PAD for t in targets])
    correct = int(((predicted == np.asarray(targets)) & keep).sum())
    return correct, int(keep.sum())


def teacher_forced_accuracy(logits: Tensor, targets: Sequence[int]) -> float:
    """Fraction of non-PAD positions whose argmax logit is the target token."""
    correct, total = _accuracy_counts(logits, targets)
    if total == 0:
        raise ContractError("accuracy of an all-PAD target is undefined")
    return correct / total


def sequence_logprob(logits: Tensor, tokens: Sequence[int]) -> Tensor:
    """
    Sum of log-probabilities of the non-PAD tokens of a decoded sequence.

    Scored under the decoding distribution, PAD and BOS masked out before the softmax.
    """
    keep = np.array([t != PAD for t in tokens], dtype=np.float64)
    offset = tensor(blocked_logit_offset(logits.shape[1]))
    picked = gather(log_softmax_rows(add(logits, offset)), list(tokens))
    return sum_all(mul(picked, tensor(keep)))


def leave_one_out_baselines(rewards: Sequence[float]) -> np.ndarray:
    """b_i = mean of the other K - 1 rewards."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ConfigurationError(f"leave-one-out baselines need K >= 2 rewards, got {r.size}")
    return (r.sum() - r) / (r.size - 1)


# ===== Learning rate =====


def lr_schedule(step: int, epoch: int, config: TrainConfig) -> float:
    """
    Learning rate of the update numbered `step` (1-based) in `epoch` (0-based).

    CE: linear warmup from 0 to peak_lr over warmup_steps, then post_warmup_lr (peak_lr
    when unset). RL: rl_lr * rl_decay^(epoch // rl_decay_every), floored at min_lr.
    """
    if config.stage == "ce":
        if step < config.warmup_steps:
            return config.peak_lr * max(step, 0) / config.warmup_steps
        return config.peak_lr if config.post_warmup_lr is None else config.post_warmup_lr
    decayed = config.rl_lr * config.rl_decay ** (epoch // config.rl_decay_every)
    return max(decayed, config.min_lr)


# ===== Optimisers =====


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class Optimizer:
    def __init__(self, params: Sequence[Tensor]) -> None:
        self.params = list(params)

    def _update(self, index: int, grad: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError(type(self).__name__)

    def step(self, lr: float) -> None:
        updates: List[Tuple[Tensor, np.ndarray]] = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            new = p.data - self._update(i, p.grad, lr)
            if not np.all(np.isfinite(new)):
                raise NumericalError("parameter update produced non-finite values")
            updates.append((p, new))
        for p, new in updates:
            p.data = new


class Sgd(Optimizer):
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9) -> None:
        super().__init__(params)
        self.momentum = momentum
        self.velocity: Dict[int, np.ndarray] = {}

    def _update(self, index: int, grad: np.ndarray, lr: float) -> np.ndarray:
        v = self.velocity.get(index)
        v = grad.copy() if v is None else self.momentum * v + grad
        self.velocity[index] = v
        return lr * v


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-9,
    ) -> None:
        super().__init__(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments: Dict[int, Tuple[np.ndarray, np.ndarray, int]] = {}

    def _update(self, index: int, grad: np.ndarray, lr: float) -> np.ndarray:
        m, v, t = self.moments.get(index, (np.zeros_like(grad), np.zeros_like(grad), 0))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.moments[index] = (m, v, t)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, store: ParameterStore) -> Optimizer:
    params = store.unique_tensors()
    if config.optimizer == "adam":
        return Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return Sgd(params, config.momentum)


# ===== Steps =====


def encode_targets(corpus: CaptionCorpus, record: CorpusRecord) -> Tuple[List[int], List[int]]:
    return pad_pair(
        corpus.vocab.a.encode(record.caption_a), corpus.vocab.b.encode(record.caption_b)
    )


def ce_batch_loss(
    model: EhatDecoder,
    corpus: CaptionCorpus,
    batch: Sequence[CorpusRecord],
    mode: str = "train",
    rng: Optional[RngStream] = None,
) -> Tuple[Tensor, float, float]:
    """Mean CE loss over a batch; returns (loss, mean loss_a, mean loss_b)."""
    if not batch:
        raise ContractError("empty training batch")
    total: Optional[Tensor] = None
    sum_a = sum_b = 0.0
    for record in batch:
        targets_a, targets_b = encode_targets(corpus, record)
        sub = rng.child("example", record.image_id) if rng is not None else None
        logits_a, logits_b = forward_teacher_forced(
            model, corpus.region_features(record.image_id), targets_a, targets_b, mode, sub
        )
        loss, loss_a, loss_b = ce_loss(logits_a, logits_b, targets_a, targets_b)
        total = loss if total is None else add(total, loss)
        sum_a += loss_a.item()
        sum_b += loss_b.item()
    assert total is not None
    n = len(batch)
    return scale(total, 1.0 / n), sum_a / n, sum_b / n


@dataclass
class ScstSample:
    tokens_a: List[int]
    tokens_b: List[int]
    reward_a: float
    reward_b: float
    baseline_a: float = 0.0
    baseline_b: float = 0.0

    @property
    def advantage_a(self) -> float:
        return self.reward_a - self.baseline_a

    @property
    def advantage_b(self) -> float:
        return self.reward_b - self.baseline_b

    @property
    def reward(self) -> float:
        return 0.5 * (self.reward_a + self.reward_b)


@dataclass
class ScstDiagnostics:
    loss: float
    reward: float
    reward_a: float
    reward_b: float
    advantage_mean: float
    advantage_abs_max: float
    advantage_sum_max: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class CiderRewards:
    """CIDEr-D statistics of both languages over the training references."""

    stats_a: CiderCorpusStats
    stats_b: CiderCorpusStats

    @classmethod
    def from_records(cls, records: Sequence[CorpusRecord]) -> "CiderRewards":
        return cls(
            CiderCorpusStats.build([r.refs_a for r in records]),
            CiderCorpusStats.build([r.refs_b for r in records]),
        )


def scst_samples(
    model: EhatDecoder,
    corpus: CaptionCorpus,
    record: CorpusRecord,
    k: int,
    rng: RngStream,
    rewards: CiderRewards,
    temperature: float = 1.0,
) -> List[ScstSample]:
    """K sampled caption pairs of one image with per-language rewards and baselines."""
    o = corpus.region_features(record.image_id)
    samples = []
    for i in range(k):
        result = sample_decode(model, o, rng.child("sample", i), temperature)
        caption_a = corpus.vocab.a.decode(result.tokens_a)
        caption_b = corpus.vocab.b.decode(result.tokens_b)
        samples.append(
            ScstSample(
                tokens_a=result.tokens_a,
                tokens_b=result.tokens_b,
                reward_a=cider_d(caption_a, record.refs_a, rewards.stats_a),
                reward_b=cider_d(caption_b, record.refs_b, rewards.stats_b),
            )
        )
    base_a = leave_one_out_baselines([s.reward_a for s in samples])
    base_b = leave_one_out_baselines([s.reward_b for s in samples])
    for s, b_a, b_b in zip(samples, base_a, base_b):
        s.baseline_a, s.baseline_b = float(b_a), float(b_b)
    return samples


def scst_loss(
    model: EhatDecoder,
    corpus: CaptionCorpus,
    batch: Sequence[CorpusRecord],
    k: int,
    rng: RngStream,
    rewards: CiderRewards,
    temperature: float = 1.0,
) -> Tuple[Tensor, ScstDiagnostics]:
    """
    Policy-gradient surrogate -sum_i (r_i - b_i) log p(w_i) / (K * B), both languages.

    Samples are drawn in eval mode and re-scored by a teacher-forced eval-mode forward
    pass that records the graph.
    """
    if k < 2:
        raise ConfigurationError(f"SCST needs K >= 2 samples, got {k}")
    if not batch:
        raise ContractError("empty SCST batch")
    total: Optional[Tensor] = None
    all_samples: List[ScstSample] = []
    advantage_sum_max = 0.0
    for record in batch:
        image_rng = rng.child("image", record.image_id)
        samples = scst_samples(model, corpus, record, k, image_rng, rewards, temperature)
        advantage_sum_max = max(
            advantage_sum_max,
            abs(sum(s.advantage_a for s in samples)),
            abs(sum(s.advantage_b for s in samples)),
        )
        o = corpus.region_features(record.image_id)
        for s in samples:
            logits_a, logits_b = forward_teacher_forced(model, o, s.tokens_a, s.tokens_b, "eval")
            term = add(
                scale(sequence_logprob(logits_a, s.tokens_a), s.advantage_a),
                scale(sequence_logprob(logits_b, s.tokens_b), s.advantage_b),
            )
            total = term if total is None else add(total, term)
        all_samples.extend(samples)
    assert total is not None
    loss = scale(total, -1.0 / (k * len(batch)))
    advantages = [a for s in all_samples for a in (s.advantage_a, s.advantage_b)]
    diagnostics = ScstDiagnostics(
        loss=loss.item(),
        reward=float(np.mean([s.reward for s in all_samples])),
        reward_a=float(np.mean([s.reward_a for s in all_samples])),
        reward_b=float(np.mean([s.reward_b for s in all_samples])),
        advantage_mean=float(np.mean(advantages)),
        advantage_abs_max=float(np.max(np.abs(advantages))),
        advantage_sum_max=advantage_sum_max,
    )
    return loss, diagnostics


def apply_update(
    loss: Tensor, store: ParameterStore, optimizer: Optimizer, lr: float, clip_norm: float
) -> float:
    """Backpropagate, clip and step; returns the pre-clip gradient norm."""
    store.zero_grad()
    backward(loss)
    norm = clip_grad_norm(optimizer.params, clip_norm)
    optimizer.step(lr)
    return norm


def scst_step(
    model: EhatDecoder,
    corpus: CaptionCorpus,
    batch: Sequence[CorpusRecord],
    k: int,
    rng: RngStream,
    rewards: CiderRewards,
    optimizer: Optimizer,
    lr: float,
    clip_norm: float = 5.0,
    temperature: float = 1.0,
) -> ScstDiagnostics:
    loss, diagnostics = scst_loss(model, corpus, batch, k, rng, rewards, temperature)
    apply_update(loss, model.params, optimizer, lr, clip_norm)
    return diagnostics


# ===== Evaluation =====


def decode_records(
    model: EhatDecoder, corpus: CaptionCorpus, records: Sequence[CorpusRecord]
) -> Dict[int, Tuple[List[str], List[str]]]:
    """Greedy caption pairs (tokens) keyed by image id."""
    out = {}
    for record in records:
        result = greedy_decode(model, corpus.region_features(record.image_id))
        out[record.image_id] = (
            corpus.vocab.a.decode(result.tokens_a),
            corpus.vocab.b.decode(result.tokens_b),
        )
    return out


def split_records(
    corpus: CaptionCorpus, split: str, limit: Optional[int] = None
) -> List[CorpusRecord]:
    records = corpus.split(split)
    if limit is not None:
        records = records[:limit]
    if not records:
        raise DataError(f"split '{split}' has no records")
    return records


def evaluate(
    model: EhatDecoder, corpus: CaptionCorpus, split: str = "val", limit: Optional[int] = None
) -> MetricTable:
    records = split_records(corpus, split, limit)
    candidates = decode_records(model, corpus, records)
    references = {r.image_id: (r.refs_a, r.refs_b) for r in records}
    return corpus_eval(candidates, references)


def evaluate_accuracy(
    model: EhatDecoder, corpus: CaptionCorpus, split: str = "train", limit: Optional[int] = None
) -> Tuple[float, float]:
    """Teacher-forced next-token accuracy of both languages over a split."""
    counts = np.zeros(4, dtype=np.int64)
    with no_grad():
        for record in split_records(corpus, split, limit):
            targets_a, targets_b = encode_targets(corpus, record)
            logits_a, logits_b = forward_teacher_forced(
                model, corpus.region_features(record.image_id), targets_a, targets_b
            )
            counts[:2] += _accuracy_counts(logits_a, targets_a)
            counts[2:] += _accuracy_counts(logits_b, targets_b)
    return counts[0] / counts[1], counts[2] / counts[3]


def metric_record(table: MetricTable) -> Dict[str, Dict[str, float]]:
    return {
        row.language: {
            "bleu1": row.bleu1,
            "bleu4": row.bleu4,
            "rouge_l": row.rouge_l,
            "cider_d": row.cider_d,
        }
        for row in table.rows
    }


def format_lr_table(rows: Sequence[Tuple[str, MetricTable]]) -> str:
    """Aligned table: one row per learning rate, B@1/B@4/R/C of both languages."""
    columns = [f"{lang}.{c}" for lang in ("A", "B") for c in ("B@1", "B@4", "R", "C")]
    lines = [f"{'lr':<10}" + "".join(f"{c:>9}" for c in columns)]
    for label, table in rows:
        cells = [v for row in table.rows for v in row.values()]
        lines.append(f"{label:<10}" + "".join(format_cell(v, 9) for v in cells))
    return "\n".join(lines) + "\n"


# ===== Trainer =====


@dataclass
class TrainResult:
    stage: str
    steps: int
    best: Optional[LedgerEntry]
    last_checkpoint: Optional[str]
    history: List[Dict[str, Any]] = field(default_factory=list)
    lr_rows: List[Tuple[str, MetricTable]] = field(default_factory=list)


def resolve_init_checkpoint(init_from: Optional[str]) -> Optional[str]:
    """A checkpoint file, or the best CE checkpoint of a run directory."""
    if init_from is None:
        return None
    if os.path.isdir(init_from):
        entry = best_checkpoint(init_from, "ce")
        if entry is None:
            raise ContractError(f"run directory {init_from} has no CE checkpoint")
        return entry.path
    if not os.path.exists(init_from):
        raise ContractError(f"checkpoint {init_from} does not exist")
    return init_from


class Trainer:
    """
    Runs one training stage of a model on a corpus and writes its run directory.

    The RL stage requires `config.init_from` (a CE checkpoint or CE run directory).
    """

    def __init__(
        self,
        model: EhatDecoder,
        corpus: CaptionCorpus,
        config: TrainConfig,
        run_dir: str,
    ) -> None:
        if corpus.d_k != model.config.d_model:
            raise DataError(
                f"corpus region features have d_k={corpus.d_k}, "
                f"model expects {model.config.d_model}"
            )
        sizes = (len(corpus.vocab.a), len(corpus.vocab.b))
        if sizes != (model.config.vocab_a, model.config.vocab_b):
            raise DataError(
                f"corpus vocabularies {len(corpus.vocab.a)}/{len(corpus.vocab.b)} do not match "
                f"decoder {model.config.vocab_a}/{model.config.vocab_b}"
            )
        self.model = model
        self.corpus = corpus
        self.config = config
        self.run_dir = run_dir
        self.rng = RngStream(config.seed).child("train", config.stage)
        self.optimizer = make_optimizer(config, model.params)
        self.metrics_path = os.path.join(run_dir, "metrics.jsonl")
        self.step = 0
        self.epoch = 0
        self.history: List[Dict[str, Any]] = []
        self.last_checkpoint: Optional[str] = None

    def _checkpoint_path(self, tag: str) -> str:
        return os.path.join(self.run_dir, "checkpoints", f"{self.config.stage}_{tag}.ckpt")

    def _save(self, path: str, val_cider: Optional[float], diagnostic: bool = False) -> None:
        ensure_dir(os.path.dirname(path))
        header = {"stage": self.config.stage, "step": self.step, "epoch": self.epoch}
        save_model(self.model, path, header)
        record_checkpoint(
            self.run_dir, path, self.config.stage, self.step, self.epoch, val_cider, diagnostic
        )

    def _diverged(self, error: Exception) -> DivergenceError:
        path = self._checkpoint_path(f"diverged_step{self.step:06d}")
        self._save(path, None, diagnostic=True)
        log(f"[Train] Divergence at step {self.step}: {error}; diagnostic checkpoint {path}")
        return DivergenceError(f"training diverged at step {self.step}: {error}", path)

    def evaluate_and_checkpoint(self) -> MetricTable:
        table = evaluate(self.model, self.corpus, self.config.eval_split, self.config.eval_limit)
        path = self._checkpoint_path(f"step{self.step:06d}")
        self._save(path, table.mean_cider)
        self.last_checkpoint = path
        append_metrics(
            self.metrics_path,
            {
                "step": self.step,
                "stage": self.config.stage,
                "epoch": self.epoch,
                "split": self.config.eval_split,
                "val": metric_record(table),
            },
        )
        log(
            f"[Eval] step {self.step}: CIDEr-D A={table.row('A').cider_d:.3f} "
            f"B={table.row('B').cider_d:.3f}"
        )
        return table

    def _batches(self, records: Sequence[CorpusRecord]) -> List[List[CorpusRecord]]:
        order = self.rng.child("epoch", self.epoch).permutation(len(records))
        shuffled = [records[int(i)] for i in order]
        size = self.config.batch_size
        return [shuffled[i : i + size] for i in range(0, len(shuffled), size)]

    def _done(self) -> bool:
        return self.config.max_steps is not None and self.step >= self.config.max_steps

    def _log_step(self, record: Dict[str, Any]) -> None:
        self.history.append(record)
        append_metrics(self.metrics_path, record)

    def train(self) -> TrainResult:
        init_ledger(self.run_dir)
        init_path = resolve_init_checkpoint(self.config.init_from)
        if self.config.stage == "rl" and init_path is None:
            raise ContractError("the RL stage needs a CE checkpoint (set train.init_from)")
        if init_path is not None:
            loaded, _ = load_model(init_path)
            self.model.params.load_state_dict(loaded.params.state_dict())
            log(f"[Train] Initialised from {init_path}")
        started = time.time()
        if self.config.stage == "ce":
            self._train_ce()
            lr_rows: List[Tuple[str, MetricTable]] = []
        else:
            lr_rows = self._train_rl()
        elapsed = format_seconds(time.time() - started)
        log(f"[Train] {self.config.stage} finished after {self.step} steps ({elapsed})")
        return TrainResult(
            stage=self.config.stage,
            steps=self.step,
            best=best_checkpoint(self.run_dir, self.config.stage),
            last_checkpoint=self.last_checkpoint,
            history=self.history,
            lr_rows=lr_rows,
        )

    def _train_ce(self) -> None:
        records = split_records(self.corpus, "train")
        cfg = self.config
        for self.epoch in range(cfg.epochs):
            for batch in self._batches(records):
                lr = lr_schedule(self.step + 1, self.epoch, cfg)
                try:
                    loss, loss_a, loss_b = ce_batch_loss(
                        self.model, self.corpus, batch, "train", self.rng.child("step", self.step)
                    )
                    norm = apply_update(loss, self.model.params, self.optimizer, lr, cfg.clip_norm)
                except NumericalError as e:
                    raise self._diverged(e) from e
                self.step += 1
                self._log_step(
                    {
                        "step": self.step,
                        "stage": "ce",
                        "epoch": self.epoch,
                        "lr": lr,
                        "loss": loss.item(),
                        "loss_A": loss_a,
                        "loss_B": loss_b,
                        "grad_norm": norm,
                    }
                )
                if self.step % cfg.eval_interval == 0:
                    self.evaluate_and_checkpoint()
                if self._done():
                    break
            if self._done():
                break
        if self.step % cfg.eval_interval:
            self.evaluate_and_checkpoint()

    def _train_rl(self) -> List[Tuple[str, MetricTable]]:
        records = split_records(self.corpus, "train")
        cfg = self.config
        rewards = CiderRewards.from_records(records)
        lr_rows = [("ce", self.evaluate_and_checkpoint())]
        self._write_lr_table(lr_rows)
        for self.epoch in range(cfg.epochs):
            lr = lr_schedule(self.step + 1, self.epoch, cfg)
            for batch in self._batches(records):
                try:
                    diagnostics = scst_step(
                        self.model,
                        self.corpus,
                        batch,
                        cfg.sample_count,
                        self.rng.child("scst", self.step),
                        rewards,
                        self.optimizer,
                        lr,
                        cfg.clip_norm,
                        cfg.temperature,
                    )
                except NumericalError as e:
                    raise self._diverged(e) from e
                self.step += 1
                record = {"step": self.step, "stage": "rl", "epoch": self.epoch, "lr": lr}
                record.update(diagnostics.to_dict())
                self._log_step(record)
                if self.step % cfg.eval_interval == 0:
                    self.evaluate_and_checkpoint()
                if self._done():
                    break
            last_epoch = self._done() or self.epoch == cfg.epochs - 1
            if last_epoch or lr_schedule(self.step + 1, self.epoch + 1, cfg) != lr:
                lr_rows.append((f"{lr:g}", self.evaluate_and_checkpoint()))
                self._write_lr_table(lr_rows)
                log(f"[SCST] epoch {self.epoch}: mean reward {self.history[-1]['reward']:.3f}")
            if last_epoch:
                break
        return lr_rows

    def _write_lr_table(self, rows: Sequence[Tuple[str, MetricTable]]) -> None:
        with open(os.path.join(self.run_dir, "lr_table.txt"), "w", encoding="utf-8") as f:
            f.write(format_lr_table(rows))
