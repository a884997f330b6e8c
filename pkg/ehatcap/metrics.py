#!/usr/bin/env python3
"""
Caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D, plus the per-language corpus table.

Captions are token lists with PAD/BOS/EOS already stripped.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from ehatcap.errors import ConfigurationError, DataError

Caption = Sequence[str]
NGram = Tuple[str, ...]


def ngram_counts(tokens: Caption, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, references: Sequence[Caption]) -> int:
    """Reference length closest to c; ties go to the shorter reference."""
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - r / c))


def _clipped_counts(candidate: Caption, references: Sequence[Caption], k: int) -> Tuple[int, int]:
    cand = ngram_counts(candidate, k)
    max_ref: Counter = Counter()
    for ref in references:
        for gram, count in ngram_counts(ref, k).items():
            max_ref[gram] = max(max_ref[gram], count)
    matched = sum(min(count, max_ref[gram]) for gram, count in cand.items())
    return matched, max(0, len(candidate) - k + 1)


def _check_order(n: int) -> None:
    if not 1 <= n <= 4:
        raise ConfigurationError(f"BLEU order must be in 1..4, got {n}")


def _geometric(matches: Sequence[int], totals: Sequence[int], smoothing: bool) -> float:
    logs = []
    for k, (m, t) in enumerate(zip(matches, totals)):
        if smoothing and k > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    return math.exp(sum(logs) / len(logs))


def bleu_n(
    candidate: Caption, references: Sequence[Caption], n: int = 4, smoothing: bool = False
) -> float:
    """
    Sentence BLEU of order n.

    Geometric mean of clipped 1..n-gram precisions times the brevity penalty
    min(1, exp(1 - r/c)) with r the closest reference length. `smoothing` adds one
    to numerator and denominator of orders >= 2.
    """
    _check_order(n)
    if not candidate or not references:
        return 0.0
    matches, totals = [], []
    for k in range(1, n + 1):
        m, t = _clipped_counts(candidate, references, k)
        matches.append(m)
        totals.append(t)
    r = _closest_ref_length(len(candidate), references)
    return _brevity_penalty(len(candidate), r) * _geometric(matches, totals, smoothing)


def corpus_bleu(
    candidates: Sequence[Caption],
    references: Sequence[Sequence[Caption]],
    n: int = 4,
    smoothing: bool = False,
) -> float:
    """Corpus BLEU: clipped counts and lengths summed over all sentences first."""
    _check_order(n)
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates for {len(references)} reference sets")
    matches, totals = [0] * n, [0] * n
    c_total = r_total = 0
    for candidate, refs in zip(candidates, references):
        if not refs:
            raise DataError("every candidate needs at least one reference")
        for k in range(1, n + 1):
            m, t = _clipped_counts(candidate, refs, k)
            matches[k - 1] += m
            totals[k - 1] += t
        c_total += len(candidate)
        r_total += _closest_ref_length(len(candidate), refs)
    return _brevity_penalty(c_total, r_total) * _geometric(matches, totals, smoothing)


# ===== ROUGE-L =====


def _lcs(a: Caption, b: Caption) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Caption, references: Sequence[Caption], beta2: float = 1.2) -> float:
    """LCS F-measure (1 + β²) P R / (R + β² P), maximised over references."""
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = _lcs(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1.0 + beta2) * p * r / (r + beta2 * p))
    return best


# ===== CIDEr-D =====


@dataclass(frozen=True)
class CiderCorpusStats:
    """Document frequencies of 1..4-grams over the reference sets of a corpus."""

    document_frequency: Mapping[NGram, int]
    num_images: int
    n: int = 4

    @classmethod
    def build(cls, reference_sets: Sequence[Sequence[Caption]], n: int = 4) -> "CiderCorpusStats":
        if not reference_sets:
            raise DataError("CIDEr-D statistics need at least one reference set")
        df: Counter = Counter()
        for refs in reference_sets:
            grams = set()
            for ref in refs:
                for k in range(1, n + 1):
                    grams.update(ngram_counts(ref, k))
            df.update(grams)
        return cls(MappingProxyType(dict(df)), len(reference_sets), n)

    @property
    def log_num_images(self) -> float:
        return math.log(float(self.num_images))

    def idf(self, gram: NGram) -> float:
        return self.log_num_images - math.log(max(1.0, float(self.document_frequency.get(gram, 0))))


def _tfidf(
    tokens: Caption, stats: CiderCorpusStats
) -> Tuple[List[Dict[NGram, float]], List[float]]:
    vectors: List[Dict[NGram, float]] = []
    norms: List[float] = []
    for k in range(1, stats.n + 1):
        vec = {g: tf * stats.idf(g) for g, tf in ngram_counts(tokens, k).items()}
        vectors.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vectors, norms


def cider_d(
    candidate: Caption,
    references: Sequence[Caption],
    stats: CiderCorpusStats,
    sigma: float = 6.0,
) -> float:
    """
    CIDEr-D of one candidate: clipped tf-idf cosine per n-gram order with a Gaussian
    length penalty, averaged over the orders the reference is long enough to have,
    times 10, averaged over references.
    """
    if not candidate or not references:
        return 0.0
    cand_vec, cand_norm = _tfidf(candidate, stats)
    total = 0.0
    for ref in references:
        ref_vec, ref_norm = _tfidf(ref, stats)
        orders = min(stats.n, len(ref))
        if orders == 0:
            continue
        delta = float(len(candidate) - len(ref))
        penalty = math.exp(-(delta**2) / (2.0 * sigma**2))
        score = 0.0
        for k in range(orders):
            if cand_norm[k] == 0.0 or ref_norm[k] == 0.0:
                continue
            ref_k = ref_vec[k]
            dot = sum(min(v, ref_k[g]) * ref_k[g] for g, v in cand_vec[k].items() if g in ref_k)
            score += penalty * dot / (cand_norm[k] * ref_norm[k])
        total += 10.0 * score / orders
    return total / len(references)


# ===== Corpus table =====

LANGUAGES = ("A", "B")
TABLE_COLUMNS = ("B@1", "B@4", "M", "R", "C")


@dataclass
class MetricRow:
    language: str
    bleu1: float
    bleu4: float
    rouge_l: float
    cider_d: float
    meteor: Optional[float] = None

    def values(self) -> List[float]:
        return [self.bleu1, self.bleu4, self.rouge_l, self.cider_d]


@dataclass
class MetricTable:
    rows: List[MetricRow]
    images: int

    def row(self, language: str) -> MetricRow:
        for r in self.rows:
            if r.language == language:
                return r
        raise DataError(f"no metrics for language {language}")

    @property
    def mean_cider(self) -> float:
        return sum(r.cider_d for r in self.rows) / len(self.rows)

    def average(self) -> float:
        """Arithmetic mean of the emitted metrics of both languages (METEOR excluded)."""
        values = [v for r in self.rows for v in r.values()]
        return sum(values) / len(values)

    def to_records(self) -> List[Dict[str, object]]:
        return [dict(asdict(r), images=self.images) for r in self.rows]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def format_text(self) -> str:
        """Aligned table in the column order B@1, B@4, M, R, C (scores x100)."""
        header = f"{'lang':<6}" + "".join(f"{c:>8}" for c in TABLE_COLUMNS)
        lines = [header]
        for r in self.rows:
            cells = [r.bleu1, r.bleu4, None, r.rouge_l, r.cider_d]
            lines.append(f"{r.language:<6}" + "".join(format_cell(v) for v in cells))
        return "\n".join(lines) + "\n"


def format_cell(value: Optional[float], width: int = 8) -> str:
    if value is None:
        return f"{'-':>{width}}"
    return f"{100.0 * value:>{width}.1f}"


def corpus_eval(
    candidates: Mapping[int, Tuple[Caption, Caption]],
    references: Mapping[int, Tuple[Sequence[Caption], Sequence[Caption]]],
    smoothing: bool = False,
) -> MetricTable:
    """
    Per-language B@1, B@4, ROUGE-L and CIDEr-D over aligned image ids.

    CIDEr-D document frequencies come from the evaluated reference sets.
    """
    if not candidates:
        raise DataError("no candidates to evaluate")
    missing = sorted(set(candidates) - set(references))
    unused = sorted(set(references) - set(candidates))
    if missing or unused:
        raise DataError(
            f"candidate/reference ids are misaligned: no references for {missing[:20]}, "
            f"no candidates for {unused[:20]}"
        )
    ids = sorted(candidates)
    rows = []
    for index, language in enumerate(LANGUAGES):
        cands = [list(candidates[i][index]) for i in ids]
        refs = [[list(r) for r in references[i][index]] for i in ids]
        stats = CiderCorpusStats.build(refs)
        rows.append(
            MetricRow(
                language=language,
                bleu1=corpus_bleu(cands, refs, 1, smoothing),
                bleu4=corpus_bleu(cands, refs, 4, smoothing),
                rouge_l=sum(rouge_l(c, r) for c, r in zip(cands, refs)) / len(ids),
                cider_d=sum(cider_d(c, r, stats) for c, r in zip(cands, refs)) / len(ids),
            )
        )
    return MetricTable(rows, len(ids))
