#!/usr/bin/env python3
"""
Configuration module for the bilingual captioning toolkit.

Loads configuration from config.yaml, applies `section.key=value` overrides and
provides typed access to every section.
"""
from __future__ import annotations

import copy
import os
from dataclasses import fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from ehatcap.corpus import CorpusConfig
from ehatcap.decoder import DecoderConfig
from ehatcap.errors import ConfigurationError
from ehatcap.training import TrainConfig
from ehatcap.utils import config_hash, ensure_dir, log

EFFECTIVE_CONFIG_NAME = "config.effective.yaml"

RUN_DEFAULTS: Dict[str, Any] = {
    "run_dir": "runs/ce",
    "corpus_dir": "data/corpus",
    "experiment_dir": "runs/experiments",
    "eval_split": "test",
}
SWEEP_DEFAULTS: Dict[str, Any] = {"lambdas": [0.1, 0.3, 0.5, 1.0]}


def _field_names(cls: Any) -> List[str]:
    return [f.name for f in fields(cls)]


SECTION_KEYS: Dict[str, List[str]] = {
    "corpus": _field_names(CorpusConfig),
    "decoder": _field_names(DecoderConfig),
    "train": _field_names(TrainConfig),
    "sweep": list(SWEEP_DEFAULTS),
    "run": list(RUN_DEFAULTS),
}


def parse_override(text: str) -> Tuple[str, str, Any]:
    """Split `section.key=value`; the value is parsed as YAML so numbers keep their type."""
    if "=" not in text:
        raise ConfigurationError(f"override '{text}' is not of the form section.key=value")
    target, raw = text.split("=", 1)
    if "." not in target:
        raise ConfigurationError(f"override '{text}' does not name a section")
    section, key = target.strip().split(".", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"override '{text}': {e}") from e
    return section, key, value


class Config:
    """Configuration manager for corpus generation, training and experiments."""

    def __init__(self, config_path: Optional[str] = None, overrides: Sequence[str] = ()) -> None:
        """
        Initialize configuration.

        Args:
            config_path: Path to a YAML file. If None, uses config.yaml in the project root.
            overrides: `section.key=value` strings applied on top of the file.
        """
        if config_path is None:
            package_dir = os.path.dirname(os.path.abspath(__file__))
            config_path = os.path.join(os.path.dirname(package_dir), "config.yaml")
        self._config_path = config_path

        if not os.path.exists(config_path):
            raise ConfigurationError(f"config file {config_path} does not exist")
        with open(config_path, "r", encoding="utf-8") as f:
            try:
                loaded = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"{config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{config_path} must contain a mapping of sections")

        self._config: Dict[str, Dict[str, Any]] = {}
        for section, values in loaded.items():
            self._check_key(section)
            if values is None:
                values = {}
            if not isinstance(values, dict):
                raise ConfigurationError(f"section '{section}' must be a mapping")
            for key in values:
                self._check_key(section, key)
            self._config[section] = dict(values)
        for override in overrides:
            section, key, value = parse_override(override)
            self.set(section, key, value)

        # Surface bad values at load time.
        _ = (self.corpus_config, self.decoder_config(), self.train_config)

    @staticmethod
    def _check_key(section: str, key: Optional[str] = None) -> None:
        if section not in SECTION_KEYS:
            raise ConfigurationError(
                f"unknown config section '{section}', expected one of {sorted(SECTION_KEYS)}"
            )
        if key is not None and key not in SECTION_KEYS[section]:
            raise ConfigurationError(f"unknown config key '{section}.{key}'")

    def set(self, section: str, key: str, value: Any) -> None:
        self._check_key(section, key)
        self._config.setdefault(section, {})[key] = value

    def section(self, name: str) -> Dict[str, Any]:
        self._check_key(name)
        return dict(self._config.get(name, {}))

    # ===== Core Properties =====

    @property
    def config_path(self) -> str:
        return self._config_path

    # ===== Corpus Settings =====

    @property
    def corpus_config(self) -> CorpusConfig:
        values = self.section("corpus")
        if "ratios" in values:
            values["ratios"] = tuple(values["ratios"])
        try:
            return CorpusConfig(**values)
        except TypeError as e:
            raise ConfigurationError(f"corpus section: {e}") from e

    # ===== Model Settings =====

    def decoder_config(
        self, vocab_a: Optional[int] = None, vocab_b: Optional[int] = None
    ) -> DecoderConfig:
        """
        Decoder settings; vocabulary sizes default to the given corpus sizes.

        Explicit `decoder.vocab_a/vocab_b` values win, so a mismatch surfaces when the
        model meets the corpus.
        """
        values = self.section("decoder")
        if vocab_a is not None:
            values.setdefault("vocab_a", vocab_a)
        if vocab_b is not None:
            values.setdefault("vocab_b", vocab_b)
        return DecoderConfig.from_dict(values)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.section("train"))

    # ===== Experiment Settings =====

    @property
    def sweep_lambdas(self) -> List[float]:
        lambdas = self.section("sweep").get("lambdas", SWEEP_DEFAULTS["lambdas"])
        if not lambdas:
            raise ConfigurationError("sweep.lambdas must list at least one value")
        return [float(v) for v in lambdas]

    def _run_value(self, key: str) -> Any:
        return self.section("run").get(key, RUN_DEFAULTS[key])

    @property
    def run_dir(self) -> str:
        return str(self._run_value("run_dir"))

    @property
    def corpus_dir(self) -> str:
        return str(self._run_value("corpus_dir"))

    @property
    def experiment_dir(self) -> str:
        return str(self._run_value("experiment_dir"))

    @property
    def eval_split(self) -> str:
        return str(self._run_value("eval_split"))

    # ===== Provenance =====

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        """Effective configuration: every section with defaults filled in."""
        corpus = self.corpus_config.__dict__.copy()
        corpus["ratios"] = list(corpus["ratios"])
        return {
            "corpus": corpus,
            "decoder": self.decoder_config().to_dict(),
            "train": self.train_config.to_dict(),
            "sweep": {"lambdas": self.sweep_lambdas},
            "run": {key: self._run_value(key) for key in RUN_DEFAULTS},
        }

    def hash(self) -> str:
        return config_hash(self.as_dict())

    def write_effective(self, out_dir: str, extra: Optional[Dict[str, Any]] = None) -> str:
        """Echo the effective configuration into `out_dir`; returns the file path."""
        ensure_dir(out_dir)
        payload = copy.deepcopy(self.as_dict())
        if extra:
            for section, values in extra.items():
                payload.setdefault(section, {}).update(values)
        path = os.path.join(out_dir, EFFECTIVE_CONFIG_NAME)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(payload, f, sort_keys=True, default_flow_style=False)
        log(f"[CLI] Effective config ({self.hash()[:12]}) written to {path}")
        return path


# Global config instance
_config_instance: Optional[Config] = None


def get_config(config_path: Optional[str] = None, overrides: Sequence[str] = ()) -> Config:
    """
    Get the global configuration instance.

    Args:
        config_path: Path to config.yaml (only used on first call)
        overrides: `section.key=value` strings (only used on first call)

    Returns:
        Config instance
    """
    global _config_instance
    if _config_instance is None:
        _config_instance = Config(config_path, overrides)
    return _config_instance


def reset_config() -> None:
    """Drop the global instance (used when a command loads a different file)."""
    global _config_instance
    _config_instance = None
