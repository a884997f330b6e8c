#!/usr/bin/env python3
"""
Exception hierarchy shared by every ehatcap module.

The CLI maps these to exit codes: NumericalError and DivergenceError exit with 2,
every other EhatError exits with 1.
"""
from __future__ import annotations

from typing import Optional


class EhatError(Exception):
    """Base class for all errors raised by ehatcap."""


class DimensionError(EhatError):
    """Operand shapes do not conform."""


class ContractError(EhatError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(EhatError):
    """A configuration value is invalid or unknown."""


class DataError(EhatError):
    """Input data is malformed or inconsistent."""


class NumericalError(EhatError):
    """A tensor operation produced a non-finite value."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None) -> None:
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
