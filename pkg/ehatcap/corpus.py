#!/usr/bin/env python3
"""
Synthetic bilingual caption corpus.

Scenes are small sets of coloured shapes. Language A describes them in English-like
order ("two red circles and a blue square"); language B uses a disjoint vocabulary
(every token suffixed with `_b`), reverses the word order inside each object phrase
and lists the phrases in reverse scene order. Region features encode each object as
a noisy base vector repeated `count` times, padded with background distractors.
"""
from __future__ import annotations

import itertools
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from ehatcap.errors import ConfigurationError, DataError
from ehatcap.persistence import load_checkpoint, prepare_run_dir, save_checkpoint
from ehatcap.tensor import RngStream, Tensor
from ehatcap.utils import log

COLORS = ("red", "blue", "green")
SHAPES = ("circle", "square", "triangle")
COUNT_WORDS = {1: "a", 2: "two", 3: "three"}
CONNECTOR = "and"
B_SUFFIX = "_b"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

T = TypeVar("T")


# ===== Scenes =====


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    count: int


@dataclass(frozen=True)
class Scene:
    objects: Tuple[SceneObject, ...]

    def to_record(self) -> List[List[object]]:
        return [[o.color, o.shape, o.count] for o in self.objects]

    @classmethod
    def from_record(cls, record: Sequence[Sequence[object]]) -> "Scene":
        return cls(tuple(SceneObject(str(c), str(s), int(str(n))) for c, s, n in record))


def generate_scene(seed: int, index: int) -> Scene:
    """
    Deterministic scene of 1-4 objects.

    Object kinds are drawn without replacement from the nine (colour, shape) pairs, so
    no kind appears twice in a scene; each count is uniform in 1-3.
    """
    rng = RngStream(seed).child("scene", index)
    n_objects = rng.integers(1, 5)
    kinds = list(itertools.product(COLORS, SHAPES))
    order = rng.permutation(len(kinds))[:n_objects]
    objects = []
    for k in order:
        color, shape = kinds[int(k)]
        objects.append(SceneObject(color, shape, rng.integers(1, 4)))
    return Scene(tuple(objects))


# ===== Captions =====


def _phrase_a(obj: SceneObject) -> List[str]:
    shape = obj.shape if obj.count == 1 else obj.shape + "s"
    return [COUNT_WORDS[obj.count], obj.color, shape]


def _caption_a(objects: Sequence[SceneObject]) -> List[str]:
    tokens: List[str] = []
    for i, obj in enumerate(objects):
        if i:
            tokens.append(CONNECTOR)
        tokens.extend(_phrase_a(obj))
    return tokens


def translate_caption_a_to_b(tokens: Sequence[str]) -> List[str]:
    """Apply the language-B rules to a language-A caption."""
    phrases: List[List[str]] = [[]]
    for token in tokens:
        if token == CONNECTOR:
            phrases.append([])
        else:
            phrases[-1].append(token)
    out: List[str] = []
    for i, phrase in enumerate(reversed(phrases)):
        if i:
            out.append(CONNECTOR + B_SUFFIX)
        out.extend(token + B_SUFFIX for token in reversed(phrase))
    return out


def render_captions(scene: Scene) -> Tuple[List[str], List[str]]:
    """Canonical (language A, language B) caption pair of a scene."""
    caption_a = _caption_a(scene.objects)
    return caption_a, translate_caption_a_to_b(caption_a)


def render_reference_set(scene: Scene, max_refs: int = 5) -> List[Tuple[List[str], List[str]]]:
    """
    Up to `max_refs` caption pairs: the canonical pair, then pairs for other object
    orders (permutations in lexicographic order of object index).
    """
    if max_refs < 1:
        raise ConfigurationError(f"max_refs must be positive, got {max_refs}")
    refs: List[Tuple[List[str], List[str]]] = []
    for perm in itertools.permutations(range(len(scene.objects))):
        caption_a = _caption_a([scene.objects[i] for i in perm])
        refs.append((caption_a, translate_caption_a_to_b(caption_a)))
        if len(refs) == max_refs:
            break
    return refs


# ===== Region features =====


@dataclass(frozen=True)
class RegionFeatureSpec:
    d_k: int
    noise_scale: float = 0.1
    min_regions: int = 10
    max_regions: int = 50
    max_extra_distractors: int = 5
    table_seed: int = 0


@lru_cache(maxsize=8)
def _base_table(d_k: int, table_seed: int) -> Dict[str, np.ndarray]:
    rng = RngStream(table_seed).child("base_table")
    table = {f"{c}/{s}": rng.normal((d_k,)) for c, s in itertools.product(COLORS, SHAPES)}
    table["background"] = rng.normal((d_k,))
    return table


def make_region_features(scene: Scene, spec: RegionFeatureSpec, rng: RngStream) -> Tensor:
    """
    N x d_k region features with N in [min_regions, max_regions].

    One noisy vector per object, repeated `count` times, then background distractors
    up to at least `min_regions` plus a random number of extras; rows are shuffled.
    """
    if spec.d_k < 1 or not 1 <= spec.min_regions <= spec.max_regions:
        raise ConfigurationError(f"invalid region feature spec {spec}")
    table = _base_table(spec.d_k, spec.table_seed)
    rows: List[np.ndarray] = []
    for obj in scene.objects:
        vector = table[f"{obj.color}/{obj.shape}"] + spec.noise_scale * rng.normal((spec.d_k,))
        rows.extend([vector] * obj.count)
    extra = rng.integers(0, spec.max_extra_distractors + 1)
    n_distractors = max(0, spec.min_regions - len(rows)) + extra
    for _ in range(n_distractors):
        rows.append(table["background"] + spec.noise_scale * rng.normal((spec.d_k,)))
    rows = rows[: spec.max_regions]
    order = rng.permutation(len(rows))
    return Tensor(np.stack([rows[int(i)] for i in order]))


# ===== Vocabularies =====


class Vocab:
    """Token table with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]) -> None:
        self.tokens: List[str] = list(SPECIAL_TOKENS) + [
            t for t in tokens if t not in SPECIAL_TOKENS
        ]
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def encode(self, tokens: Sequence[str], add_eos: bool = True) -> List[int]:
        ids = [self.index.get(t, UNK) for t in tokens]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Tokens up to the first EOS, without PAD/BOS."""
        out: List[str] = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else SPECIAL_TOKENS[UNK])
        return out

    def to_list(self) -> List[str]:
        return list(self.tokens[len(SPECIAL_TOKENS) :])


@dataclass
class VocabPair:
    a: Vocab
    b: Vocab

    def to_dict(self) -> Dict[str, List[str]]:
        return {"a": self.a.to_list(), "b": self.b.to_list()}

    @classmethod
    def from_dict(cls, payload: Dict[str, List[str]]) -> "VocabPair":
        return cls(Vocab(payload["a"]), Vocab(payload["b"]))


def _filtered(captions: Iterable[Sequence[str]], min_freq: int, lang: str) -> Vocab:
    counts = Counter(t for caption in captions for t in caption)
    kept = [t for t, n in counts.items() if n >= min_freq]
    if not kept:
        raise ConfigurationError(
            f"language {lang} vocabulary is empty at min_freq={min_freq} "
            f"(highest frequency {max(counts.values(), default=0)})"
        )
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


def build_vocab(
    records: Sequence["CorpusRecord"], min_freq_a: int = 1, min_freq_b: Optional[int] = None
) -> VocabPair:
    """Frequency-filtered vocabularies over every reference caption of `records`."""
    min_b = min_freq_a if min_freq_b is None else min_freq_b
    return VocabPair(
        a=_filtered((ref for r in records for ref in r.refs_a), min_freq_a, "A"),
        b=_filtered((ref for r in records for ref in r.refs_b), min_b, "B"),
    )


# ===== Splits =====


def split_dataset(
    items: Sequence[T], ratios: Sequence[float], seed: int
) -> Tuple[List[T], List[T], List[T]]:
    """Deterministic disjoint train/val/test split with sizes round(ratio * n)."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(items)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    order = RngStream(seed).child("split").permutation(n)
    shuffled = [items[int(i)] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


# ===== Corpus =====


@dataclass
class CorpusConfig:
    seed: int = 42
    size: int = 1000
    d_k: int = 64
    noise_scale: float = 0.1
    max_refs: int = 5
    max_extra_distractors: int = 5
    ratios: Tuple[float, float, float] = (0.9, 0.05, 0.05)
    min_freq_a: int = 1
    min_freq_b: int = 1

    @property
    def feature_spec(self) -> RegionFeatureSpec:
        return RegionFeatureSpec(
            d_k=self.d_k,
            noise_scale=self.noise_scale,
            max_extra_distractors=self.max_extra_distractors,
            table_seed=self.seed,
        )


@dataclass
class CorpusRecord:
    image_id: int
    scene: Scene
    caption_a: List[str]
    caption_b: List[str]
    refs_a: List[List[str]]
    refs_b: List[List[str]]
    split: str = "train"

    def to_json(self) -> Dict[str, object]:
        return {
            "image_id": self.image_id,
            "scene": self.scene.to_record(),
            "caption_a": self.caption_a,
            "caption_b": self.caption_b,
            "references": {"a": self.refs_a, "b": self.refs_b},
            "split": self.split,
            "features": f"features.ckpt#image.{self.image_id}",
        }

    @classmethod
    def from_json(cls, payload: Dict[str, object]) -> "CorpusRecord":
        refs = payload["references"]
        assert isinstance(refs, dict)
        return cls(
            image_id=int(payload["image_id"]),  # type: ignore[call-overload]
            scene=Scene.from_record(payload["scene"]),  # type: ignore[arg-type]
            caption_a=list(payload["caption_a"]),  # type: ignore[call-overload]
            caption_b=list(payload["caption_b"]),  # type: ignore[call-overload]
            refs_a=[list(r) for r in refs["a"]],
            refs_b=[list(r) for r in refs["b"]],
            split=str(payload["split"]),
        )


@dataclass
class CaptionCorpus:
    records: List[CorpusRecord]
    features: Dict[int, np.ndarray]
    vocab: VocabPair
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def split(self, name: str) -> List[CorpusRecord]:
        return [r for r in self.records if r.split == name]

    def region_features(self, image_id: int) -> Tensor:
        try:
            return Tensor(self.features[image_id])
        except KeyError:
            raise DataError(f"no region features for image {image_id}") from None

    @property
    def d_k(self) -> int:
        return int(next(iter(self.features.values())).shape[1])


def make_record(config: CorpusConfig, index: int) -> Tuple[CorpusRecord, np.ndarray]:
    scene = generate_scene(config.seed, index)
    caption_a, caption_b = render_captions(scene)
    refs = render_reference_set(scene, config.max_refs)
    rng = RngStream(config.seed).child("features", index)
    features = make_region_features(scene, config.feature_spec, rng)
    record = CorpusRecord(
        image_id=index,
        scene=scene,
        caption_a=caption_a,
        caption_b=caption_b,
        refs_a=[a for a, _ in refs],
        refs_b=[b for _, b in refs],
    )
    return record, features.numpy()


def generate_corpus(config: CorpusConfig) -> CaptionCorpus:
    """Build a corpus of `config.size` scenes with splits and vocabularies."""
    if config.size < 1:
        raise ConfigurationError(f"corpus size must be positive, got {config.size}")
    records: List[CorpusRecord] = []
    features: Dict[int, np.ndarray] = {}
    for index in range(config.size):
        record, feats = make_record(config, index)
        records.append(record)
        features[index] = feats
    train, val, test = split_dataset(list(range(config.size)), config.ratios, config.seed)
    assignment = {i: "train" for i in train}
    assignment.update({i: "val" for i in val})
    assignment.update({i: "test" for i in test})
    for record in records:
        record.split = assignment[record.image_id]
    vocab = build_vocab(records, config.min_freq_a, config.min_freq_b)
    log(
        f"[Corpus] {config.size} scenes ({len(train)}/{len(val)}/{len(test)}), "
        f"vocab {len(vocab.a)}/{len(vocab.b)}"
    )
    return CaptionCorpus(records, features, vocab, config)


# ===== Files =====


def save_corpus(corpus: CaptionCorpus, out_dir: str, force: bool = False) -> None:
    """Write corpus.jsonl, features.ckpt and vocab.json into `out_dir`."""
    prepare_run_dir(out_dir, force=force)
    with open(os.path.join(out_dir, "corpus.jsonl"), "w", encoding="utf-8") as f:
        for record in corpus.records:
            f.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    save_checkpoint(
        os.path.join(out_dir, "features.ckpt"),
        {f"image.{i}": corpus.features[i] for i in sorted(corpus.features)},
        header={"corpus": _config_dict(corpus.config)},
    )
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump(corpus.vocab.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    log(f"[Corpus] Wrote {len(corpus.records)} records to {out_dir}")


def _config_dict(config: CorpusConfig) -> Dict[str, object]:
    payload = dict(config.__dict__)
    payload["ratios"] = list(config.ratios)
    return payload


def load_corpus(corpus_dir: str) -> CaptionCorpus:
    """Read a corpus written by `save_corpus`."""
    records_path = os.path.join(corpus_dir, "corpus.jsonl")
    if not os.path.exists(records_path):
        raise DataError(f"no corpus found in {corpus_dir}")
    with open(records_path, "r", encoding="utf-8") as f:
        records = [CorpusRecord.from_json(json.loads(line)) for line in f if line.strip()]
    arrays, header = load_checkpoint(os.path.join(corpus_dir, "features.ckpt"))
    features = {int(path.split(".", 1)[1]): arr for path, arr in arrays.items()}
    missing = [r.image_id for r in records if r.image_id not in features]
    if missing:
        raise DataError(f"records without region features: {missing[:10]}")
    with open(os.path.join(corpus_dir, "vocab.json"), "r", encoding="utf-8") as f:
        vocab = VocabPair.from_dict(json.load(f))
    raw = dict(header.get("corpus", {}))
    if "ratios" in raw:
        raw["ratios"] = tuple(raw["ratios"])
    config = CorpusConfig(**raw) if raw else CorpusConfig()
    return CaptionCorpus(records, features, vocab, config)
