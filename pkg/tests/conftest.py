#!/usr/bin/env python3
"""
Pytest configuration and shared fixtures.

Provides a tiny synthetic corpus, a matching decoder, and a temporary config.yaml.
Logging is silenced for every test.
"""
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ehatcap import config as config_module
from ehatcap.corpus import CorpusConfig, generate_corpus
from ehatcap.decoder import DecoderConfig, EhatDecoder
from ehatcap.tensor import RngStream, tensor
from ehatcap.training import TrainConfig
from ehatcap.utils import set_quiet


# ===== Test Configuration =====


@pytest.fixture(autouse=True)
def quiet_logs():
    """Keep test output free of training logs."""
    set_quiet(True)
    yield
    set_quiet(False)


@pytest.fixture(autouse=True)
def reset_config_singleton():
    """Reset the config module's global instance around every test."""
    config_module._config_instance = None
    yield
    config_module._config_instance = None


@pytest.fixture
def test_config_file(tmp_path):
    """Create a temporary config.yaml sized for fast tests."""
    config_file = tmp_path / "config.yaml"
    config_file.write_text(
        f"""
# Test configuration
corpus:
  seed: 3
  size: 16
  d_k: 8
  max_refs: 2
  ratios: [0.5, 0.25, 0.25]

decoder:
  d_model: 8
  layers: 1
  heads: 2
  d_ff: 16
  dropout: 0.0

train:
  epochs: 1
  max_steps: 2
  batch_size: 2
  warmup_steps: 2
  peak_lr: 0.001
  optimizer: "adam"
  eval_interval: 2
  eval_limit: 2
  sample_count: 2

sweep:
  lambdas: [0.0, 0.5]

run:
  run_dir: "{tmp_path / 'runs' / 'ce'}"
  corpus_dir: "{tmp_path / 'corpus'}"
  experiment_dir: "{tmp_path / 'experiments'}"
  eval_split: "val"
"""
    )
    return str(config_file)


# ===== Shared Fixtures =====


@pytest.fixture(scope="session")
def tiny_corpus_config():
    return CorpusConfig(seed=3, size=16, d_k=8, max_refs=2, ratios=(0.5, 0.25, 0.25))


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_config):
    """Sixteen scenes with d_k=8 region features (8 train / 4 val / 4 test)."""
    set_quiet(True)
    return generate_corpus(tiny_corpus_config)


@pytest.fixture
def tiny_decoder_config(tiny_corpus):
    return DecoderConfig(
        d_model=8,
        layers=1,
        heads=2,
        d_ff=16,
        max_len=20,
        dropout=0.0,
        vocab_a=len(tiny_corpus.vocab.a),
        vocab_b=len(tiny_corpus.vocab.b),
    )


@pytest.fixture
def tiny_model(tiny_decoder_config):
    return EhatDecoder(tiny_decoder_config)


@pytest.fixture
def baseline_model(tiny_decoder_config):
    return EhatDecoder(replace(tiny_decoder_config, use_ehat=False))


@pytest.fixture
def regions():
    """Five region features of width 8."""
    return tensor(RngStream(11).normal((5, 8)))


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def tiny_train_config():
    """Two Adam steps on batches of two with one evaluation of two images."""
    return TrainConfig(
        epochs=1,
        max_steps=2,
        batch_size=2,
        warmup_steps=2,
        peak_lr=1e-3,
        optimizer="adam",
        eval_interval=2,
        eval_limit=2,
        sample_count=2,
    )


@pytest.fixture
def random_matrix():
    """Factory for fixed random matrices."""

    def make(rows, cols, seed=0, scale=1.0):
        return np.random.default_rng(seed).normal(0.0, scale, (rows, cols))

    return make
