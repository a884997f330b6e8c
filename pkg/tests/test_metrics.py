#!/usr/bin/env python3
"""
Unit tests for metrics.py
"""
import json
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ehatcap.errors import ConfigurationError, DataError
from ehatcap.metrics import (
    CiderCorpusStats,
    MetricRow,
    MetricTable,
    bleu_n,
    cider_d,
    corpus_bleu,
    corpus_eval,
    format_cell,
    rouge_l,
)

pytestmark = pytest.mark.unit


def words(text):
    return text.split()


# ====== Tests: BLEU ======


def test_bleu_perfect_match():
    ref = words("two red circles and a blue square")
    for n in range(1, 5):
        assert bleu_n(ref, [ref], n) == pytest.approx(1.0)


def test_bleu_brevity_penalty():
    """Test that a 5-token candidate against a 10-token reference scores e^-1 at n=1."""
    ref = words("a b c d e f g h i j")
    assert bleu_n(ref[:5], [ref], 1) == pytest.approx(math.exp(-1.0))


def test_bleu_zero_matches_is_zero():
    assert bleu_n(words("a b c d"), [words("a c b d")], 4) == 0.0
    assert bleu_n(words("x y"), [words("a b")], 1) == 0.0
    assert bleu_n([], [words("a b")], 1) == 0.0


def test_bleu_smoothing_keeps_partial_credit():
    cand, refs = words("a b c d"), [words("a c b d")]
    assert bleu_n(cand, refs, 4, smoothing=True) > 0.0


def test_bleu_clips_repeated_tokens():
    assert bleu_n(words("the the the"), [words("the cat")], 1) == pytest.approx(
        (1.0 / 3.0) * 1.0
    )


def test_bleu_rejects_bad_order():
    with pytest.raises(ConfigurationError):
        bleu_n(words("a"), [words("a")], 5)


def test_corpus_bleu_sums_counts():
    cands = [words("a b"), words("c d e")]
    refs = [[words("a b")], [words("c d f")]]
    assert corpus_bleu(cands, refs, 1) == pytest.approx(4.0 / 5.0)
    with pytest.raises(DataError):
        corpus_bleu(cands, refs[:1], 1)


# ====== Tests: ROUGE-L ======


def test_rouge_l_example():
    assert rouge_l(words("a b c"), [words("a c")], beta2=1.0) == pytest.approx(0.8)


def test_rouge_l_extremes():
    caption = words("a red circle")
    assert rouge_l(caption, [caption]) == pytest.approx(1.0)
    assert rouge_l(caption, [words("circle_b red_b a_b")]) == 0.0
    assert rouge_l([], [caption]) == 0.0


def test_rouge_l_never_drops_when_adding_references():
    rng = np.random.default_rng(0)
    vocab = [f"w{i}" for i in range(6)]
    for _ in range(200):
        cand = list(rng.choice(vocab, size=rng.integers(1, 8)))
        refs = [list(rng.choice(vocab, size=rng.integers(1, 8)))]
        extra = list(rng.choice(vocab, size=rng.integers(1, 8)))
        assert rouge_l(cand, refs + [extra]) >= rouge_l(cand, refs)


# ====== Tests: CIDEr-D ======


def test_cider_exact_match_scores_ten():
    ref_one, ref_two = words("a red circle"), words("two blue squares")
    stats = CiderCorpusStats.build([[ref_one], [ref_two]])
    assert cider_d(ref_one, [ref_one], stats) == pytest.approx(10.0)
    assert cider_d(ref_two, [ref_two], stats) == pytest.approx(10.0)


def test_cider_hand_computed_partial_match():
    """Test one shared unigram out of three against a hand-computed oracle."""
    ref_one, ref_two = words("a red circle"), words("two blue squares")
    stats = CiderCorpusStats.build([[ref_one], [ref_two]])
    # unigram cosine 1/3 (idf is log 2 for every gram); no shared bigrams or trigrams
    assert cider_d(words("a blue triangle"), [ref_one], stats) == pytest.approx(10.0 / 9.0)


def test_cider_empty_candidate_and_reference_order():
    refs = [words("a red circle"), words("a circle red")]
    stats = CiderCorpusStats.build([refs, [words("two blue squares")]])
    assert cider_d([], refs, stats) == 0.0
    cand = words("a red square")
    assert cider_d(cand, refs, stats) == pytest.approx(cider_d(cand, refs[::-1], stats))


def test_cider_length_penalty():
    ref = words("a red circle")
    stats = CiderCorpusStats.build([[ref], [words("two blue squares")]])
    longer = ref + ["and", "more", "words"]
    assert 0.0 < cider_d(longer, [ref], stats) < 10.0


def test_cider_stats_need_references():
    with pytest.raises(DataError):
        CiderCorpusStats.build([])


def test_cider_idf_floors_unknown_grams():
    stats = CiderCorpusStats.build([[words("a b")], [words("c d")]])
    assert stats.idf(("zzz",)) == pytest.approx(math.log(2.0))
    assert stats.document_frequency[("a",)] == 1


# ====== Tests: Corpus evaluation ======


@pytest.fixture
def references():
    return {
        0: ([words("a red circle")], [words("circle_b red_b a_b")]),
        1: ([words("two blue squares"), words("two squares")], [words("squares_b blue_b two_b")]),
        2: ([words("three green triangles")], [words("triangles_b green_b three_b")]),
    }


def test_corpus_eval_perfect_candidates(references):
    candidates = {i: (refs_a[0], refs_b[0]) for i, (refs_a, refs_b) in references.items()}
    table = corpus_eval(candidates, references)
    assert table.images == 3
    for language in ("A", "B"):
        assert table.row(language).bleu1 == pytest.approx(1.0)
        assert table.row(language).rouge_l == pytest.approx(1.0)
    assert corpus_eval(candidates, references) == table


def test_corpus_eval_errors(references):
    with pytest.raises(DataError):
        corpus_eval({}, references)
    with pytest.raises(DataError, match="misaligned"):
        corpus_eval({0: (["a"], ["a_b"]), 7: (["b"], ["b_b"])}, references)


def test_metric_table_formatting():
    table = MetricTable(
        [MetricRow("A", 0.5, 0.25, 0.4, 1.2), MetricRow("B", 0.6, 0.3, 0.5, 0.8)], images=2
    )
    lines = table.format_text().splitlines()
    assert lines[0].split() == ["lang", "B@1", "B@4", "M", "R", "C"]
    assert lines[1].split() == ["A", "50.0", "25.0", "-", "40.0", "120.0"]
    assert table.mean_cider == pytest.approx(1.0)
    assert table.average() == pytest.approx((0.5 + 0.25 + 0.4 + 1.2 + 0.6 + 0.3 + 0.5 + 0.8) / 8)
    records = [json.loads(line) for line in table.to_jsonl().splitlines()]
    assert records[1]["language"] == "B" and records[1]["images"] == 2
    assert format_cell(None, 4) == "   -"
    with pytest.raises(DataError):
        table.row("C")
