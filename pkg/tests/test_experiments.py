#!/usr/bin/env python3
"""
Tests for experiments.py

Covers the result tables, the training curves of a run, small end-to-end runs of
the ablation, the λ sweep and the HARN variant comparison, and the overfit and SCST
acceptance runs (full size under the `slow` marker).
"""
import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ehatcap.decoder import DecoderConfig
from ehatcap.errors import ContractError
from ehatcap.experiments import (
    ABLATION_ROWS,
    AVERAGE_FOOTER,
    ExperimentRow,
    OverfitSettings,
    ScstSanityResult,
    ScstSanitySettings,
    ScstSeedResult,
    ToyModel,
    format_experiment_table,
    format_scst_sanity_report,
    is_non_increasing,
    run_ablation,
    run_lambda_sweep,
    run_overfit,
    run_scst_sanity,
    run_variants,
    seed_reward_windows,
    train_and_evaluate,
    variant_curves,
    window_means,
)
from ehatcap.metrics import MetricRow, MetricTable
from ehatcap.persistence import append_metrics, read_metrics


def make_row(label, cider_a=1.0, cider_b=0.5):
    table = MetricTable(
        [MetricRow("A", 0.5, 0.25, 0.4, cider_a), MetricRow("B", 0.6, 0.3, 0.5, cider_b)],
        images=4,
    )
    return ExperimentRow(
        label, DecoderConfig(d_model=8, heads=2), table, "0123456789abcdef", "runs/x", {"ehat": 7}
    )


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ====== Tests: Tables ======


@pytest.mark.unit
def test_experiment_table_layout():
    text = format_experiment_table([make_row("full"), make_row("no-HCA", cider_a=0.2)])
    lines = text.splitlines()
    header = lines[0].split()
    assert header[0] == "model"
    assert header[1:6] == ["A.B@1", "A.B@4", "A.M", "A.R", "A.C"]
    assert header[-2:] == ["Avg", "hash"]
    assert lines[1].split()[:6] == ["full", "50.0", "25.0", "-", "40.0", "100.0"]
    assert lines[1].split()[-1] == "0123456789ab"
    assert lines[-1] == AVERAGE_FOOTER


@pytest.mark.unit
def test_experiment_table_extra_column():
    text = format_experiment_table(
        [make_row("Prototype")], "variant", ("EHAT params", lambda r: str(r.parameters["ehat"]))
    )
    lines = text.splitlines()
    assert lines[0].startswith("variant")
    assert "params" in lines[0]
    assert lines[1].split()[-2] == "7"


@pytest.mark.unit
def test_experiment_row_record():
    record = make_row("full").to_record()
    assert record["label"] == "full"
    assert record["average"] == pytest.approx(make_row("full").table.average())
    assert [m["language"] for m in record["metrics"]] == ["A", "B"]
    assert record["decoder"]["d_model"] == 8


@pytest.mark.unit
def test_ablation_rows_switch_one_component_each():
    labels = [label for label, _ in ABLATION_ROWS]
    assert labels == ["no-MHCA", "no-HARN", "no-HCA", "full"]
    for label, overrides in ABLATION_ROWS[:3]:
        assert len(overrides) == 1
        DecoderConfig(d_model=8, heads=2, **overrides)


@pytest.mark.unit
def test_variant_curves_read_eval_records(tmp_path):
    path = str(tmp_path / "metrics.jsonl")
    append_metrics(path, {"step": 1, "loss": 3.0})
    scores = {"bleu1": 0.4, "cider_d": 0.9}
    append_metrics(path, {"step": 2, "val": {"A": scores, "B": {"bleu1": 0.2, "cider_d": 0.1}}})
    curves = variant_curves("Variant 1", str(tmp_path))
    assert curves == [
        {
            "variant": "Variant 1",
            "step": 2,
            "A_bleu1": 0.4,
            "A_cider_d": 0.9,
            "B_bleu1": 0.2,
            "B_cider_d": 0.1,
        }
    ]


# ====== Tests: End-to-end runs ======


@pytest.mark.integration
def test_train_and_evaluate_writes_its_run(
    tiny_corpus, tiny_decoder_config, tiny_train_config, tmp_path
):
    row = train_and_evaluate(
        "Full EHAT", tiny_corpus, tiny_decoder_config, tiny_train_config, str(tmp_path), "val"
    )
    assert row.run_dir == os.path.join(str(tmp_path), "full-ehat")
    assert os.path.exists(os.path.join(row.run_dir, "ledger.db"))
    assert row.table.images == 4
    assert len(row.config_hash) == 64
    assert row.parameters["ehat"] > 0


@pytest.mark.integration
def test_lambda_sweep_writes_table_and_records(
    tiny_corpus, tiny_decoder_config, tiny_train_config, tmp_path
):
    out_dir = str(tmp_path)
    rows = run_lambda_sweep(
        tiny_corpus, tiny_decoder_config, tiny_train_config, out_dir, (0.0, 0.5), "val"
    )
    assert [r.label for r in rows] == ["lambda=0", "lambda=0.5"]
    assert [r.decoder.lam for r in rows] == [0.0, 0.5]
    assert rows[0].config_hash != rows[1].config_hash
    records = read_jsonl(os.path.join(out_dir, "sweep_lambda.jsonl"))
    assert [r["label"] for r in records] == ["lambda=0", "lambda=0.5"]
    with open(os.path.join(out_dir, "sweep_lambda.txt"), "r", encoding="utf-8") as f:
        assert f.readline().startswith("lambda")


@pytest.mark.integration
def test_ablation_trains_every_configuration(
    tiny_corpus, tiny_decoder_config, tiny_train_config, tmp_path
):
    rows = run_ablation(tiny_corpus, tiny_decoder_config, tiny_train_config, str(tmp_path), "val")
    assert [r.label for r in rows] == ["no-MHCA", "no-HARN", "no-HCA", "full"]
    assert rows[0].decoder.mhca_mode == "matmul"
    assert rows[1].decoder.harn_weight == "ones"
    assert rows[2].decoder.hca_mode == "matmul"
    assert len({r.config_hash for r in rows}) == 4
    assert os.path.exists(os.path.join(str(tmp_path), "ablation.txt"))


@pytest.mark.integration
def test_variants_report_parameter_counts_and_curves(
    tiny_corpus, tiny_decoder_config, tiny_train_config, tmp_path
):
    rows = run_variants(tiny_corpus, tiny_decoder_config, tiny_train_config, str(tmp_path), "val")
    counts = {r.label: r.parameters["ehat"] for r in rows}
    assert counts["Variant 1"] < counts["Prototype"] == counts["Variant 2"]
    curves = read_jsonl(os.path.join(str(tmp_path), "curves.jsonl"))
    assert {c["variant"] for c in curves} == {"Prototype", "Variant 1", "Variant 2"}
    assert all(c["step"] == 2 for c in curves)


# ====== Tests: Acceptance helpers ======


TINY_MODEL = ToyModel(d_model=8, layers=1, heads=2)


@pytest.mark.unit
def test_window_means_drop_partial_window():
    assert window_means([1.0, 2.0, 3.0, 4.0, 5.0], 2) == [1.5, 3.5]
    assert window_means([1.0], 2) == []
    with pytest.raises(ContractError):
        window_means([1.0], 0)


@pytest.mark.unit
def test_is_non_increasing():
    assert is_non_increasing([3.0, 2.0, 2.0, 1.0])
    assert not is_non_increasing([3.0, 2.0, 2.5])
    assert is_non_increasing([3.0, 2.0, 2.5], slack=0.5)
    assert is_non_increasing([])


@pytest.mark.unit
def test_overfit_settings_train_on_every_scene():
    settings = OverfitSettings(scenes=4, model=TINY_MODEL)
    corpus_config = settings.corpus_config()
    assert (corpus_config.size, corpus_config.d_k) == (4, 8)
    assert corpus_config.ratios == (1.0, 0.0, 0.0)
    train = settings.train_config()
    assert (train.max_steps, train.optimizer, train.eval_split) == (2000, "adam", "train")


@pytest.mark.unit
def test_seed_reward_windows():
    history = [
        {"reward": r, "advantage_sum_max": a}
        for r, a in ((1.0, 0.0), (2.0, 1e-15), (3.0, 0.0), (5.0, 2e-16))
    ]
    row = seed_reward_windows(3, history, 2, "runs/seed-3")
    assert (row.first_reward, row.last_reward) == (1.5, 4.0)
    assert row.advantage_sum_max == 1e-15
    assert row.improved
    with pytest.raises(ContractError):
        seed_reward_windows(3, history, 5, "runs/seed-3")


@pytest.mark.unit
def test_scst_sanity_needs_enough_seeds_and_balanced_advantages():
    settings = ScstSanitySettings(seeds=(0, 1, 2), required_seeds=2)
    rows = [
        ScstSeedResult(0, 1.0, 1.2, 1e-15, "a"),
        ScstSeedResult(1, 1.0, 0.9, 0.0, "b"),
        ScstSeedResult(2, 1.0, 1.1, 3e-16, "c"),
    ]
    result = ScstSanityResult(settings, "ce.ckpt", rows)
    assert result.improved_count == 2
    assert result.passed
    lines = format_scst_sanity_report(result).splitlines()
    assert lines[0].split()[:3] == ["seed", "first-20", "last-20"]
    assert lines[2].split()[-1] == "no"
    assert lines[-1].startswith("improved on 2 of 3 seeds")

    rows[0] = ScstSeedResult(0, 1.0, 1.2, 1e-9, "a")
    assert not ScstSanityResult(settings, "ce.ckpt", rows).passed


# ====== Tests: Acceptance runs ======


@pytest.mark.integration
def test_overfit_run_reports_accuracy_and_loss_windows(tmp_path):
    settings = OverfitSettings(scenes=4, max_steps=4, batch_size=2, loss_window=2, model=TINY_MODEL)
    result = run_overfit(settings, str(tmp_path))
    assert result.steps == 4
    assert 0.0 <= result.accuracy_a <= 1.0 and 0.0 <= result.accuracy_b <= 1.0
    records = read_metrics(os.path.join(result.run_dir, "metrics.jsonl"))
    losses = [r["loss"] for r in records if "loss" in r]
    assert result.loss_windows == pytest.approx(window_means(losses, 2))
    with open(os.path.join(str(tmp_path), "overfit.json"), "r", encoding="utf-8") as f:
        record = json.load(f)
    assert record["passed"] == result.passed
    assert record["settings"]["model"]["d_model"] == 8
    assert os.path.exists(os.path.join(str(tmp_path), "overfit.txt"))


@pytest.mark.integration
def test_scst_sanity_run_balances_advantages_at_every_step(tmp_path):
    settings = ScstSanitySettings(
        scenes=16,
        ce_steps=2,
        ce_batch_size=2,
        steps=3,
        samples=2,
        seeds=(0, 1),
        reward_window=2,
        required_seeds=1,
        batch_size=1,
        eval_limit=1,
        model=TINY_MODEL,
    )
    result = run_scst_sanity(settings, str(tmp_path))
    assert [row.seed for row in result.rows] == [0, 1]
    assert result.init_from.startswith(os.path.join(str(tmp_path), "ce"))
    for row in result.rows:
        records = read_metrics(os.path.join(row.run_dir, "metrics.jsonl"))
        steps = [r for r in records if "reward" in r]
        assert len(steps) == 3
        assert all(r["advantage_sum_max"] <= 1e-12 for r in steps)
        assert row.first_reward == pytest.approx(np.mean([r["reward"] for r in steps[:2]]))
    assert result.advantages_balanced
    records = read_jsonl(os.path.join(str(tmp_path), "scst_sanity.jsonl"))
    assert [r["seed"] for r in records] == [0, 1]


@pytest.mark.slow
def test_toy_overfit_reaches_full_accuracy(tmp_path):
    """Test that 50 scenes are memorised by a 2-layer d=64 decoder within 2000 CE steps."""
    result = run_overfit(OverfitSettings(), str(tmp_path))
    assert result.steps <= 2000
    assert result.accuracy_a >= 0.99 and result.accuracy_b >= 0.99
    assert result.loss_decreasing


@pytest.mark.slow
def test_scst_improves_reward_on_most_seeds(tmp_path):
    """Test that 200 SCST steps with K=5 raise the mean sampled reward on 4 of 5 seeds."""
    result = run_scst_sanity(ScstSanitySettings(), str(tmp_path))
    assert result.advantage_sum_max <= 1e-12
    assert result.improved_count >= 4
