#!/usr/bin/env python3
"""
On-disk formats: tensor checkpoints, the sqlite run ledger, the metric log
and attention exports.
"""
from __future__ import annotations

import json
import os
import sqlite3
import struct
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from ehatcap.errors import ConfigurationError, DataError
from ehatcap.utils import ensure_dir, is_nonempty_dir, log

CHECKPOINT_MAGIC = b"EHATCKPT"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


# ===== Checkpoints =====


def save_checkpoint(
    path: str, tensors: Mapping[str, np.ndarray], header: Optional[Dict[str, Any]] = None
) -> None:
    """
    Write named float64 arrays to `path`.

    Layout: magic, uint32 version, uint32 header length, JSON header, then every
    array as little-endian float64 in row-major order at the offset recorded in the
    header's entry table.
    """
    entries = []
    offset = 0
    for name, values in tensors.items():
        arr = np.asarray(values, dtype=np.float64)
        entries.append({"path": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    meta = {"config": header or {}, "entries": entries}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for values in tensors.values():
            f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint; returns (arrays by path, config header)."""
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    if len(raw) < start + header_len:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        meta = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable checkpoint header: {e}") from e
    payload = memoryview(raw)[start + header_len :]

    tensors: Dict[str, np.ndarray] = {}
    for path_name, shape, begin in _checkpoint_entries(path, meta):
        count = int(np.prod(shape)) if shape else 1
        if begin + count * 8 > len(payload):
            raise DataError(f"{path}: entry '{path_name}' runs past the payload")
        arr = np.frombuffer(payload[begin : begin + count * 8], dtype="<f8")
        tensors[path_name] = arr.astype(np.float64).reshape(shape)
    config = meta.get("config", {})
    if not isinstance(config, dict):
        raise DataError(f"{path}: checkpoint config header is not a mapping")
    return tensors, config


def _is_count(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _checkpoint_entries(path: str, meta: Any) -> List[Tuple[str, Tuple[int, ...], int]]:
    """Validated (path, shape, byte offset) of every entry in a checkpoint header."""
    if not isinstance(meta, dict) or not isinstance(meta.get("entries"), list):
        raise DataError(f"{path}: checkpoint header has no entry table")
    out = []
    for i, entry in enumerate(meta["entries"]):
        if not isinstance(entry, dict):
            raise DataError(f"{path}: checkpoint entry {i} is not a mapping")
        name, shape, offset = entry.get("path"), entry.get("shape"), entry.get("offset")
        if not isinstance(name, str):
            raise DataError(f"{path}: checkpoint entry {i} has no path")
        if not isinstance(shape, list) or not all(_is_count(d) for d in shape):
            raise DataError(f"{path}: entry '{name}' has an invalid shape {shape!r}")
        if not _is_count(offset):
            raise DataError(f"{path}: entry '{name}' has an invalid offset {offset!r}")
        out.append((name, tuple(shape), offset))
    return out


# ===== Run directories =====


def prepare_run_dir(path: str, force: bool = False) -> None:
    """Create an output directory, refusing to write into a non-empty one without force."""
    if is_nonempty_dir(path) and not force:
        raise ConfigurationError(f"output directory {path} is not empty (use --force)")
    ensure_dir(path)


# ===== Checkpoint ledger =====


@dataclass
class LedgerEntry:
    path: str
    stage: str
    step: int
    epoch: int
    val_cider: Optional[float]
    is_diagnostic: bool


def get_ledger_path(run_dir: str) -> str:
    """Get the path to the SQLite ledger of a run directory."""
    return os.path.join(run_dir, "ledger.db")


def init_ledger(run_dir: str) -> None:
    """Initialize the SQLite checkpoint ledger."""
    ensure_dir(run_dir)
    conn = sqlite3.connect(get_ledger_path(run_dir))
    try:
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS checkpoints (
                path TEXT PRIMARY KEY,
                stage TEXT NOT NULL,
                step INTEGER NOT NULL,
                epoch INTEGER NOT NULL,
                val_cider REAL,
                is_diagnostic INTEGER NOT NULL DEFAULT 0,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """
        )
        conn.commit()
    finally:
        conn.close()


def record_checkpoint(
    run_dir: str,
    path: str,
    stage: str,
    step: int,
    epoch: int,
    val_cider: Optional[float],
    is_diagnostic: bool = False,
) -> None:
    """Register a checkpoint file in the ledger."""
    init_ledger(run_dir)
    conn = sqlite3.connect(get_ledger_path(run_dir))
    try:
        conn.execute(
            """
            INSERT OR REPLACE INTO checkpoints (path, stage, step, epoch, val_cider, is_diagnostic)
            VALUES (?, ?, ?, ?, ?, ?)
        """,
            (os.path.relpath(path, run_dir), stage, step, epoch, val_cider, int(is_diagnostic)),
        )
        conn.commit()
    finally:
        conn.close()
    log(f"[Ledger] {stage} step {step}: {os.path.basename(path)} (val CIDEr-D {val_cider})")


def list_checkpoints(run_dir: str, stage: Optional[str] = None) -> List[LedgerEntry]:
    db_path = get_ledger_path(run_dir)
    if not os.path.exists(db_path):
        return []
    conn = sqlite3.connect(db_path)
    try:
        query = "SELECT path, stage, step, epoch, val_cider, is_diagnostic FROM checkpoints"
        args: Tuple[Any, ...] = ()
        if stage is not None:
            query += " WHERE stage = ?"
            args = (stage,)
        rows = conn.execute(query + " ORDER BY step", args).fetchall()
    finally:
        conn.close()
    return [
        LedgerEntry(
            path=os.path.join(run_dir, row[0]),
            stage=row[1],
            step=row[2],
            epoch=row[3],
            val_cider=row[4],
            is_diagnostic=bool(row[5]),
        )
        for row in rows
    ]


def best_checkpoint(run_dir: str, stage: str) -> Optional[LedgerEntry]:
    """Highest validation CIDEr-D among non-diagnostic checkpoints; ties go to the earliest step."""
    best: Optional[LedgerEntry] = None
    for entry in list_checkpoints(run_dir, stage):
        if entry.is_diagnostic or entry.val_cider is None:
            continue
        if best is None or entry.val_cider > best.val_cider:  # type: ignore[operator]
            best = entry
    return best


# ===== Metric log =====


def append_metrics(path: str, record: Mapping[str, Any]) -> None:
    """Append one JSON record to a line-delimited metric log."""
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(dict(record), sort_keys=True) + "\n")


def read_metrics(path: str) -> List[Dict[str, Any]]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ===== Attention export =====


def write_matrix_blocks(path: str, blocks: Iterable[Tuple[str, int, np.ndarray]]) -> int:
    """
    Write matrices as text blocks.

    Every block starts with `# name=<name> step=<t> shape=<r>x<c>` followed by one
    whitespace-separated line per row. Returns the number of blocks written.
    """
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for name, step, matrix in blocks:
            arr = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
            f.write(f"# name={name} step={step} shape={arr.shape[0]}x{arr.shape[1]}\n")
            for row in arr:
                f.write(" ".join(f"{v:.10g}" for v in row) + "\n")
            count += 1
    return count


def _block_header(path: str, lineno: int, line: str) -> Tuple[str, int, int, int]:
    if not line.startswith("# "):
        raise DataError(f"{path}:{lineno}: expected a block header")
    fields = dict(part.split("=", 1) for part in line[2:].split() if "=" in part)
    missing = [key for key in ("name", "step", "shape") if key not in fields]
    if missing:
        raise DataError(f"{path}:{lineno}: block header lacks {', '.join(missing)}")
    try:
        rows, cols = (int(v) for v in fields["shape"].split("x"))
        step = int(fields["step"])
    except ValueError as e:
        raise DataError(f"{path}:{lineno}: malformed block header: {e}") from e
    return fields["name"], step, rows, cols


def read_matrix_blocks(path: str) -> List[Tuple[str, int, np.ndarray]]:
    """Parse a file written by `write_matrix_blocks`."""
    blocks: List[Tuple[str, int, np.ndarray]] = []
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f]
    i = 0
    while i < len(lines):
        name, step, rows, cols = _block_header(path, i + 1, lines[i])
        body = lines[i + 1 : i + 1 + rows]
        if len(body) < rows:
            raise DataError(f"{path}: block '{name}' has {len(body)} of {rows} rows")
        try:
            values = np.array([[float(v) for v in row.split()] for row in body])
            blocks.append((name, step, values.reshape(rows, cols)))
        except ValueError as e:
            raise DataError(f"{path}: block '{name}' is not a {rows}x{cols} matrix: {e}") from e
        i += 1 + rows
    return blocks
