#!/usr/bin/env python3
"""
Utility functions for the bilingual captioning toolkit.
"""
from __future__ import annotations

import hashlib
import json
import os
import pathlib
import re
from datetime import datetime
from typing import Any

_quiet = False


def set_quiet(quiet: bool) -> None:
    """Silence (or re-enable) log output."""
    global _quiet
    _quiet = quiet


def log(message: str) -> None:
    """Print with timestamp."""
    if _quiet:
        return
    timestamp = datetime.now().strftime("%H:%M:%S.%f")[:-3]
    print(f"[{timestamp}] {message}", flush=True)


def slugify(text: str) -> str:
    """Convert a name to a filesystem-friendly slug."""
    text = text.lower()
    text = re.sub(r"[^a-z0-9]+", "-", text).strip("-")
    return text or "run"


def ensure_dir(path: str) -> None:
    pathlib.Path(path).mkdir(parents=True, exist_ok=True)


def is_nonempty_dir(path: str) -> bool:
    return os.path.isdir(path) and bool(os.listdir(path))


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON encoding of a configuration mapping."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def format_seconds(seconds: float) -> str:
    """Format a duration as M:SS."""
    if seconds < 0:
        return "0:00"
    total = int(seconds)
    return f"{total // 60}:{total % 60:02d}"
