#!/usr/bin/env python3
"""
Experiment runners behind the CLI: gradient checks of every EHAT block, the
component ablation, the λ sweep, the HARN variant comparison and the two toy-scale
acceptance runs (CE overfit and SCST reward improvement across seeds).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ehatcap.attention import build_mask, ffn, init_ffn, init_multi_head, multi_head
from ehatcap.corpus import CaptionCorpus, CorpusConfig, generate_corpus
from ehatcap.decoder import (
    DecoderConfig,
    EhatDecoder,
    count_parameters,
    forward_teacher_forced,
    load_model,
)
from ehatcap.ehat import MhcaParams, harn, hca, init_harn, mhca, mhca_project_prefix
from ehatcap.errors import ContractError
from ehatcap.gradcheck import GradCheckResult, GraphBuilder, grad_check_report
from ehatcap.metrics import MetricTable, format_cell
from ehatcap.persistence import prepare_run_dir, read_metrics
from ehatcap.tensor import (
    ParameterStore,
    RngStream,
    Tensor,
    add,
    mul,
    sum_all,
    tensor,
)
from ehatcap.training import TrainConfig, Trainer, ce_loss, evaluate, evaluate_accuracy
from ehatcap.utils import config_hash, log, slugify

GRADCHECK_BLOCKS = (
    "mhca",
    "harn.prototype",
    "harn.v1",
    "harn.v2",
    "hca",
    "multi_head",
    "ffn",
    "full_model",
)
GRADCHECK_TOLERANCE = 1e-4

ABLATION_ROWS: Tuple[Tuple[str, Dict[str, Any]], ...] = (
    ("no-MHCA", {"mhca_mode": "matmul"}),
    ("no-HARN", {"harn_weight": "ones"}),
    ("no-HCA", {"hca_mode": "matmul"}),
    ("full", {}),
)
SWEEP_LAMBDAS = (0.1, 0.3, 0.5, 1.0)
VARIANT_ROWS = (("Prototype", "prototype"), ("Variant 1", "v1"), ("Variant 2", "v2"))
AVERAGE_FOOTER = "Avg is the mean of the 8 emitted metrics; METEOR (M) is not computed."


# ===== Gradient checks =====


@dataclass
class GradCheckBlock:
    name: str
    result: GradCheckResult
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.result.max_rel_error < self.tolerance


class _Weighted:
    """Random fixed projection of block outputs onto a scalar loss."""

    def __init__(self, rng: RngStream) -> None:
        self.rng = rng
        self.weights: Dict[Tuple[str, Tuple[int, ...]], Tensor] = {}

    def __call__(self, name: str, x: Tensor) -> Tensor:
        key = (name, x.shape)
        if key not in self.weights:
            self.weights[key] = tensor(self.rng.child(name).normal(x.shape))
        return sum_all(mul(x, self.weights[key]))


def _total(*terms: Tensor) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def _inputs(store: ParameterStore, rng: RngStream, shapes: Dict[str, Tuple[int, int]]) -> None:
    for name, shape in shapes.items():
        store.add(f"input.{name}", rng.child("input", name).normal(shape, 0.5))


def _mhca_case(d: int, m: int, n: int, rng: RngStream) -> Tuple[ParameterStore, GraphBuilder]:
    store = ParameterStore()
    _inputs(store, rng, {"o": (n, d), "e": (m, d), "c": (m, d)})
    w = _Weighted(rng.child("weights"))
    regions = build_mask("padding", n, n - 1)
    lang = build_mask("combined", m, m - 1)
    params = MhcaParams(dropout_rate=0.0)

    def builder(p: ParameterStore) -> Tensor:
        masks = (regions, None, None)
        o_hat, e_hat, c_hat = mhca(p["input.o"], p["input.e"], p["input.c"], masks, params)
        stacked = mhca_project_prefix(p["input.e"], lang, 0.0)
        return _total(w("o", o_hat), w("e", e_hat), w("c", c_hat), w("prefix", stacked))

    return store, builder


def _harn_case(variant: str, d: int, rng: RngStream) -> Tuple[ParameterStore, GraphBuilder]:
    store = ParameterStore()
    _inputs(store, rng, {"o": (d, d), "e": (2 * d, d), "c": (2 * d, d)})
    params = init_harn(store, "harn", d, variant, rng.child("harn"))
    w = _Weighted(rng.child("weights"))

    def builder(p: ParameterStore) -> Tensor:
        e_tilde, c_tilde, _ = harn(p["input.o"], p["input.e"], p["input.c"], params)
        return _total(w("e", e_tilde), w("c", c_tilde))

    return store, builder


def _hca_case(d: int, m: int, rng: RngStream) -> Tuple[ParameterStore, GraphBuilder]:
    store = ParameterStore()
    _inputs(store, rng, {"e": (m, d), "stack": (m * d, d), "single": (d, d)})
    w = _Weighted(rng.child("weights"))

    def builder(p: ParameterStore) -> Tensor:
        stacked = hca(p["input.e"], p["input.stack"], 0.3)
        shared = hca(p["input.e"], p["input.single"], 1.0)
        return _total(w("stacked", stacked), w("shared", shared))

    return store, builder


def _multi_head_case(d: int, m: int, n: int, rng: RngStream) -> Tuple[ParameterStore, GraphBuilder]:
    store = ParameterStore()
    _inputs(store, rng, {"x": (m, d), "o": (n, d)})
    params = init_multi_head(store, "mh", d, 2, rng.child("mh"))
    w = _Weighted(rng.child("weights"))
    causal = build_mask("combined", m, m - 1)
    cross = build_mask("padding", n, n - 1, queries=m)

    def builder(p: ParameterStore) -> Tensor:
        x, o = p["input.x"], p["input.o"]
        return _total(
            w("self", multi_head(x, x, x, params, causal)),
            w("cross", multi_head(x, o, o, params, cross)),
        )

    return store, builder


def _ffn_case(d: int, m: int, rng: RngStream) -> Tuple[ParameterStore, GraphBuilder]:
    store = ParameterStore()
    _inputs(store, rng, {"x": (m, d)})
    params = init_ffn(store, "ffn", d, 2 * d, rng.child("ffn"))
    w = _Weighted(rng.child("weights"))
    return store, lambda p: w("ffn", ffn(p["input.x"], params))


def _full_model_case(d: int, m: int, n: int, rng: RngStream) -> Tuple[ParameterStore, GraphBuilder]:
    config = DecoderConfig(
        d_model=d, layers=1, heads=2, d_ff=2 * d, max_len=m, vocab_a=9, vocab_b=9, dropout=0.0
    )
    model = EhatDecoder(config)
    o = tensor(rng.child("regions").normal((n, d)))
    targets_a = [4, 5, 6, 2] + [0] * (m - 4)
    targets_b = [7, 6, 8, 5, 2] + [0] * (m - 5)

    def builder(p: ParameterStore) -> Tensor:
        logits_a, logits_b = forward_teacher_forced(model, o, targets_a, targets_b)
        return ce_loss(logits_a, logits_b, targets_a, targets_b)[0]

    return model.params, builder


def gradcheck_cases(
    d_k: int = 8, m: int = 6, n: int = 5, seed: int = 0
) -> Dict[str, Callable[[], Tuple[ParameterStore, GraphBuilder]]]:
    rng = RngStream(seed).child("gradcheck")
    return {
        "mhca": lambda: _mhca_case(d_k, m, n, rng.child("mhca")),
        "harn.prototype": lambda: _harn_case("prototype", d_k, rng.child("prototype")),
        "harn.v1": lambda: _harn_case("v1", d_k, rng.child("v1")),
        "harn.v2": lambda: _harn_case("v2", d_k, rng.child("v2")),
        "hca": lambda: _hca_case(d_k, m, rng.child("hca")),
        "multi_head": lambda: _multi_head_case(d_k, m, n, rng.child("multi_head")),
        "ffn": lambda: _ffn_case(d_k, m, rng.child("ffn")),
        "full_model": lambda: _full_model_case(d_k, m, n, rng.child("full_model")),
    }


def run_gradcheck(
    blocks: Optional[Sequence[str]] = None,
    d_k: int = 8,
    m: int = 6,
    n: int = 5,
    seed: int = 0,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> List[GradCheckBlock]:
    cases = gradcheck_cases(d_k, m, n, seed)
    names = list(GRADCHECK_BLOCKS if blocks is None else blocks)
    unknown = [b for b in names if b not in cases]
    if unknown:
        raise ContractError(f"unknown gradient check blocks {unknown}; known: {list(cases)}")
    out = []
    for name in names:
        store, builder = cases[name]()
        result = grad_check_report(builder, store)
        log(
            f"[GradCheck] {name}: max rel err {result.max_rel_error:.3e} "
            f"({result.checked} entries)"
        )
        out.append(GradCheckBlock(name, result, tolerance))
    return out


def format_gradcheck_report(blocks: Sequence[GradCheckBlock]) -> str:
    lines = [f"{'block':<16}{'max rel err':>14}{'checked':>9}{'kinks':>7}  status"]
    for b in blocks:
        r = b.result
        status = "ok" if b.passed else "FAIL"
        lines.append(
            f"{b.name:<16}{r.max_rel_error:>14.3e}{r.checked:>9}{r.skipped_kinks:>7}  {status}"
        )
    return "\n".join(lines) + "\n"


# ===== Train-and-evaluate experiments =====


@dataclass
class ExperimentRow:
    label: str
    decoder: DecoderConfig
    table: MetricTable
    config_hash: str
    run_dir: str
    parameters: Dict[str, int] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "run_dir": self.run_dir,
            "average": self.table.average(),
            "metrics": self.table.to_records(),
            "parameters": self.parameters,
            "decoder": self.decoder.to_dict(),
        }


def train_and_evaluate(
    label: str,
    corpus: CaptionCorpus,
    decoder: DecoderConfig,
    train: TrainConfig,
    out_dir: str,
    split: str = "test",
    force: bool = False,
) -> ExperimentRow:
    """CE-train one configuration in its own run directory and score its best checkpoint."""
    run_dir = os.path.join(out_dir, slugify(label))
    prepare_run_dir(run_dir, force)
    model = EhatDecoder(decoder)
    result = Trainer(model, corpus, train, run_dir).train()
    if result.best is not None:
        model, _ = load_model(result.best.path)
    table = evaluate(model, corpus, split)
    digest = config_hash(
        {"corpus": corpus.config.__dict__, "decoder": decoder.to_dict(), "train": train.to_dict()}
    )
    log(f"[CLI] {label}: avg {100 * table.average():.1f} ({digest[:12]})")
    return ExperimentRow(label, decoder, table, digest, run_dir, count_parameters(model))


def format_experiment_table(
    rows: Sequence[ExperimentRow],
    first_column: str = "model",
    extra: Optional[Tuple[str, Callable[[ExperimentRow], str]]] = None,
) -> str:
    """Both languages' B@1 B@4 M R C, the average and the config hash of every row."""
    metric_cols = [f"{lang}.{c}" for lang in ("A", "B") for c in ("B@1", "B@4", "M", "R", "C")]
    header = f"{first_column:<12}" + "".join(f"{c:>8}" for c in metric_cols) + f"{'Avg':>8}"
    if extra is not None:
        header += f"{extra[0]:>12}"
    lines = [header + "  hash"]
    for row in rows:
        cells = []
        for lang in ("A", "B"):
            r = row.table.row(lang)
            cells += [r.bleu1, r.bleu4, None, r.rouge_l, r.cider_d]
        line = f"{row.label:<12}" + "".join(format_cell(v) for v in cells)
        line += format_cell(row.table.average())
        if extra is not None:
            line += f"{extra[1](row):>12}"
        lines.append(line + f"  {row.config_hash[:12]}")
    lines.append(AVERAGE_FOOTER)
    return "\n".join(lines) + "\n"


def _write_results(out_dir: str, name: str, rows: Sequence[ExperimentRow], text: str) -> None:
    with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    with open(os.path.join(out_dir, f"{name}.jsonl"), "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row.to_record(), sort_keys=True) + "\n")


def run_ablation(
    corpus: CaptionCorpus,
    decoder: DecoderConfig,
    train: TrainConfig,
    out_dir: str,
    split: str = "test",
    force: bool = False,
) -> List[ExperimentRow]:
    """
    Train the four component configurations: MHCA and HCA replaced by plain matrix
    products, HARN without its similarity weights, and the full model.
    """
    base = replace(decoder, use_ehat=True)
    rows = [
        train_and_evaluate(label, corpus, replace(base, **overrides), train, out_dir, split, force)
        for label, overrides in ABLATION_ROWS
    ]
    _write_results(out_dir, "ablation", rows, format_experiment_table(rows))
    return rows


def run_lambda_sweep(
    corpus: CaptionCorpus,
    decoder: DecoderConfig,
    train: TrainConfig,
    out_dir: str,
    lambdas: Sequence[float] = SWEEP_LAMBDAS,
    split: str = "test",
    force: bool = False,
) -> List[ExperimentRow]:
    rows = [
        train_and_evaluate(
            f"lambda={lam:g}",
            corpus,
            replace(decoder, lam=float(lam)),
            train,
            out_dir,
            split,
            force,
        )
        for lam in lambdas
    ]
    _write_results(out_dir, "sweep_lambda", rows, format_experiment_table(rows, "lambda"))
    return rows


def variant_curves(label: str, run_dir: str) -> List[Dict[str, Any]]:
    """B@1 and CIDEr-D of both languages at every evaluation of a run."""
    curves = []
    for record in read_metrics(os.path.join(run_dir, "metrics.jsonl")):
        if "val" not in record:
            continue
        val = record["val"]
        curves.append(
            {
                "variant": label,
                "step": record["step"],
                "A_bleu1": val["A"]["bleu1"],
                "A_cider_d": val["A"]["cider_d"],
                "B_bleu1": val["B"]["bleu1"],
                "B_cider_d": val["B"]["cider_d"],
            }
        )
    return curves


def run_variants(
    corpus: CaptionCorpus,
    decoder: DecoderConfig,
    train: TrainConfig,
    out_dir: str,
    split: str = "test",
    force: bool = False,
) -> List[ExperimentRow]:
    """Train the prototype and both HARN variants under one seed."""
    rows = []
    for label, variant in VARIANT_ROWS:
        cfg = replace(decoder, harn_variant=variant, use_ehat=True)
        rows.append(train_and_evaluate(label, corpus, cfg, train, out_dir, split, force))
    with open(os.path.join(out_dir, "curves.jsonl"), "w", encoding="utf-8") as f:
        for row in rows:
            for point in variant_curves(row.label, row.run_dir):
                f.write(json.dumps(point, sort_keys=True) + "\n")
    text = format_experiment_table(
        rows, "variant", ("EHAT params", lambda r: str(r.parameters.get("ehat", 0)))
    )
    _write_results(out_dir, "variants", rows, text)
    return rows


# ===== Acceptance runs =====

ADVANTAGE_SUM_TOLERANCE = 1e-12


def window_means(values: Sequence[float], window: int) -> List[float]:
    """Means of consecutive non-overlapping windows; a trailing partial window is dropped."""
    if window < 1:
        raise ContractError(f"window must be positive, got {window}")
    count = len(values) // window
    return [float(np.mean(values[i * window : (i + 1) * window])) for i in range(count)]


def is_non_increasing(values: Sequence[float], slack: float = 0.0) -> bool:
    return all(later <= earlier + slack for earlier, later in zip(values, values[1:]))


@dataclass
class ToyModel:
    """Decoder shape shared by the acceptance runs; vocabularies come from the corpus."""

    d_model: int = 64
    layers: int = 2
    heads: int = 4
    dropout: float = 0.0
    seed: int = 0

    def decoder_config(self, corpus: CaptionCorpus) -> DecoderConfig:
        return DecoderConfig(
            d_model=self.d_model,
            layers=self.layers,
            heads=self.heads,
            dropout=self.dropout,
            vocab_a=len(corpus.vocab.a),
            vocab_b=len(corpus.vocab.b),
            seed=self.seed,
        )


def toy_ce_config(
    max_steps: int,
    batch_size: int,
    eval_split: str,
    eval_limit: int,
    seed: int = 0,
    peak_lr: float = 1e-3,
    warmup_steps: int = 100,
) -> TrainConfig:
    """Adam CE stage that stops after `max_steps` updates and evaluates once at the end."""
    return TrainConfig(
        epochs=max_steps,
        max_steps=max_steps,
        batch_size=batch_size,
        warmup_steps=min(warmup_steps, max_steps),
        peak_lr=peak_lr,
        optimizer="adam",
        eval_interval=max_steps,
        eval_split=eval_split,
        eval_limit=eval_limit,
        seed=seed,
    )


@dataclass
class OverfitSettings:
    scenes: int = 50
    max_steps: int = 2000
    batch_size: int = 10
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    threshold: float = 0.99
    loss_window: int = 50
    loss_slack: float = 0.01
    corpus_seed: int = 42
    model: ToyModel = field(default_factory=ToyModel)

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            seed=self.corpus_seed, size=self.scenes, d_k=self.model.d_model, ratios=(1.0, 0.0, 0.0)
        )

    def train_config(self) -> TrainConfig:
        return toy_ce_config(
            self.max_steps,
            self.batch_size,
            "train",
            min(self.scenes, 5),
            self.model.seed,
            self.peak_lr,
            self.warmup_steps,
        )


@dataclass
class OverfitResult:
    settings: OverfitSettings
    steps: int
    accuracy_a: float
    accuracy_b: float
    loss_windows: List[float]
    run_dir: str

    @property
    def accurate(self) -> bool:
        return min(self.accuracy_a, self.accuracy_b) >= self.settings.threshold

    @property
    def loss_decreasing(self) -> bool:
        windows = self.loss_windows
        return len(windows) >= 2 and is_non_increasing(windows, self.settings.loss_slack)

    @property
    def passed(self) -> bool:
        return self.accurate and self.loss_decreasing

    def to_record(self) -> Dict[str, Any]:
        return {
            "settings": asdict(self.settings),
            "steps": self.steps,
            "accuracy_a": self.accuracy_a,
            "accuracy_b": self.accuracy_b,
            "loss_windows": self.loss_windows,
            "accurate": self.accurate,
            "loss_decreasing": self.loss_decreasing,
            "passed": self.passed,
            "run_dir": self.run_dir,
        }


def format_overfit_report(result: OverfitResult) -> str:
    s = result.settings
    status = {True: "ok", False: "FAIL"}
    windows = " ".join(f"{v:.3f}" for v in result.loss_windows)
    return (
        f"scenes {s.scenes}  d_model {s.model.d_model}  layers {s.model.layers}  "
        f"steps {result.steps}\n"
        f"accuracy A {result.accuracy_a:.4f}  B {result.accuracy_b:.4f}  "
        f"(>= {s.threshold:g})  {status[result.accurate]}\n"
        f"loss per {s.loss_window} steps: {windows}  {status[result.loss_decreasing]}\n"
    )


def run_overfit(settings: OverfitSettings, out_dir: str, force: bool = False) -> OverfitResult:
    """
    CE-train a toy decoder on a small all-train corpus and measure teacher-forced
    accuracy on that same corpus.
    """
    corpus = generate_corpus(settings.corpus_config())
    model = EhatDecoder(settings.model.decoder_config(corpus))
    run_dir = os.path.join(out_dir, "run")
    prepare_run_dir(run_dir, force)
    result = Trainer(model, corpus, settings.train_config(), run_dir).train()
    acc_a, acc_b = evaluate_accuracy(model, corpus, "train")
    losses = [h["loss"] for h in result.history]
    outcome = OverfitResult(
        settings,
        result.steps,
        float(acc_a),
        float(acc_b),
        window_means(losses, settings.loss_window),
        run_dir,
    )
    log(
        f"[Overfit] {result.steps} steps: accuracy A {acc_a:.4f} B {acc_b:.4f} "
        f"({'passed' if outcome.passed else 'failed'})"
    )
    with open(os.path.join(out_dir, "overfit.txt"), "w", encoding="utf-8") as f:
        f.write(format_overfit_report(outcome))
    with open(os.path.join(out_dir, "overfit.json"), "w", encoding="utf-8") as f:
        json.dump(outcome.to_record(), f, indent=2, sort_keys=True)
        f.write("\n")
    return outcome


@dataclass
class ScstSanitySettings:
    scenes: int = 500
    ce_steps: int = 1000
    ce_batch_size: int = 10
    steps: int = 200
    samples: int = 5
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    reward_window: int = 20
    required_seeds: int = 4
    batch_size: int = 2
    rl_lr: float = 1e-5
    optimizer: str = "adam"
    eval_limit: int = 5
    corpus_seed: int = 42
    model: ToyModel = field(default_factory=ToyModel)

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(seed=self.corpus_seed, size=self.scenes, d_k=self.model.d_model)

    def rl_config(self, seed: int, init_from: str) -> TrainConfig:
        return TrainConfig(
            stage="rl",
            epochs=self.steps,
            max_steps=self.steps,
            batch_size=self.batch_size,
            rl_lr=self.rl_lr,
            min_lr=min(self.rl_lr, TrainConfig.min_lr),
            sample_count=self.samples,
            optimizer=self.optimizer,
            eval_interval=self.steps + 1,
            eval_limit=self.eval_limit,
            init_from=init_from,
            seed=seed,
        )


@dataclass
class ScstSeedResult:
    seed: int
    first_reward: float
    last_reward: float
    advantage_sum_max: float
    run_dir: str

    @property
    def improved(self) -> bool:
        return self.last_reward > self.first_reward

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["improved"] = self.improved
        return record


@dataclass
class ScstSanityResult:
    settings: ScstSanitySettings
    init_from: str
    rows: List[ScstSeedResult]

    @property
    def improved_count(self) -> int:
        return sum(row.improved for row in self.rows)

    @property
    def advantage_sum_max(self) -> float:
        return max(row.advantage_sum_max for row in self.rows)

    @property
    def advantages_balanced(self) -> bool:
        return self.advantage_sum_max <= ADVANTAGE_SUM_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.improved_count >= self.settings.required_seeds and self.advantages_balanced


def seed_reward_windows(
    seed: int, history: Sequence[Dict[str, Any]], window: int, run_dir: str
) -> ScstSeedResult:
    """Mean sampled reward of the first and last `window` SCST steps of one run."""
    rewards = [h["reward"] for h in history]
    if len(rewards) < window:
        raise ContractError(f"seed {seed}: {len(rewards)} SCST steps for a {window}-step window")
    return ScstSeedResult(
        seed=seed,
        first_reward=float(np.mean(rewards[:window])),
        last_reward=float(np.mean(rewards[-window:])),
        advantage_sum_max=max(h["advantage_sum_max"] for h in history),
        run_dir=run_dir,
    )


def format_scst_sanity_report(result: ScstSanityResult) -> str:
    w = result.settings.reward_window
    lines = [f"{'seed':<6}{f'first-{w}':>12}{f'last-{w}':>12}{'max |sum adv|':>16}  improved"]
    for row in result.rows:
        lines.append(
            f"{row.seed:<6}{row.first_reward:>12.4f}{row.last_reward:>12.4f}"
            f"{row.advantage_sum_max:>16.2e}  {'yes' if row.improved else 'no'}"
        )
    balanced = "yes" if result.advantages_balanced else "no"
    lines.append(
        f"improved on {result.improved_count} of {len(result.rows)} seeds "
        f"(need {result.settings.required_seeds}); "
        f"advantage sums within {ADVANTAGE_SUM_TOLERANCE:g}: {balanced}"
    )
    return "\n".join(lines) + "\n"


def run_scst_sanity(
    settings: ScstSanitySettings,
    out_dir: str,
    init_from: Optional[str] = None,
    force: bool = False,
) -> ScstSanityResult:
    """
    SCST from one CE checkpoint under several seeds, comparing the mean sampled reward
    of the first and last steps of every run.

    Without `init_from` the CE checkpoint is trained first into `<out_dir>/ce`.
    """
    corpus = generate_corpus(settings.corpus_config())
    if init_from is None:
        ce_dir = os.path.join(out_dir, "ce")
        prepare_run_dir(ce_dir, force)
        ce_config = toy_ce_config(
            settings.ce_steps,
            settings.ce_batch_size,
            "val",
            settings.eval_limit,
            settings.model.seed,
        )
        model = EhatDecoder(settings.model.decoder_config(corpus))
        ce = Trainer(model, corpus, ce_config, ce_dir).train()
        init_from = ce.best.path if ce.best is not None else ce.last_checkpoint
        if init_from is None:
            raise ContractError(f"CE stage in {ce_dir} recorded no checkpoint")
    base, _ = load_model(init_from)
    rows = []
    for seed in settings.seeds:
        run_dir = os.path.join(out_dir, f"seed-{seed}")
        prepare_run_dir(run_dir, force)
        trainer = Trainer(
            EhatDecoder(base.config), corpus, settings.rl_config(seed, init_from), run_dir
        )
        history = trainer.train().history
        row = seed_reward_windows(seed, history, settings.reward_window, run_dir)
        log(
            f"[SCST] seed {seed}: reward {row.first_reward:.4f} -> {row.last_reward:.4f}, "
            f"max |sum adv| {row.advantage_sum_max:.2e}"
        )
        rows.append(row)
    result = ScstSanityResult(settings, init_from, rows)
    with open(os.path.join(out_dir, "scst_sanity.txt"), "w", encoding="utf-8") as f:
        f.write(format_scst_sanity_report(result))
    with open(os.path.join(out_dir, "scst_sanity.jsonl"), "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row.to_record(), sort_keys=True) + "\n")
    return result
