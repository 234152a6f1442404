"""Run directories: config snapshot, metrics log, CSV tables and embedding dumps.

Every table under ``tables/`` is rendered from ``metrics.jsonl`` alone, so
``render_tables`` can rebuild them byte for byte at any time.
"""

from __future__ import annotations

import csv
import io
import json
import shutil
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .metrics import summarize

CONFIG_SNAPSHOT = "config.yaml"
METRICS_FILE = "metrics.jsonl"

EMB_MAGIC = b"DRDMEMB\0"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<8sIII4s")
_DTYPE_TAGS = {np.dtype(np.float32): b"f32\0", np.dtype(np.float64): b"f64\0"}


class RunDirError(RuntimeError):
    pass


class RunDir:
    """A single run's output directory.

    An existing non-empty directory is refused unless ``force`` is set, and
    even then only if it already holds a config snapshot (so ``--force``
    never wipes an arbitrary directory).
    """

    def __init__(self, path, force: bool = False, create: bool = True):
        self.path = Path(path)
        if create:
            self._prepare(force)

    @classmethod
    def open(cls, path) -> "RunDir":
        rd = cls(path, create=False)
        if not rd.metrics_path.is_file():
            raise FileNotFoundError(f"no {METRICS_FILE} in run directory {rd.path}")
        return rd

    def _prepare(self, force):
        p = self.path
        if p.exists() and not p.is_dir():
            raise RunDirError(f"{p} exists and is not a directory")
        if p.is_dir() and any(p.iterdir()):
            if not force:
                raise RunDirError(f"output directory {p} is not empty (use --force to overwrite)")
            if not (p / CONFIG_SNAPSHOT).is_file():
                raise RunDirError(f"refusing to overwrite {p}: it does not look like a run directory")
            shutil.rmtree(p)
        p.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path:
        return self.path / METRICS_FILE

    @property
    def checkpoints(self) -> Path:
        d = self.path / "checkpoints"
        d.mkdir(exist_ok=True)
        return d

    @property
    def tables(self) -> Path:
        return self.path / "tables"

    @property
    def embeddings(self) -> Path:
        d = self.path / "embeddings"
        d.mkdir(exist_ok=True)
        return d

    def snapshot_config(self, cfg: RunConfig) -> Path:
        return dump_config(cfg, self.path / CONFIG_SNAPSHOT)

    def log(self, record: dict) -> None:
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        return read_records(self.metrics_path)


def read_records(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metrics log not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def eval_record(report, table: str, row: str, col: str, corner: str = "", **extra) -> dict:
    """Metrics-log record for one evaluated table cell."""
    rec = {
        "kind": "eval", "table": table, "row": str(row), "col": str(col), "corner": corner,
        "mean_top1": report.mean_top1, "ci95": report.ci95, "episodes": report.episode_count,
        "accuracies": report.accuracies, "config_hash": report.config_hash,
        "episode_hashes": report.episode_hashes,
    }
    rec.update(extra)
    return rec


def _ordered(seq):
    seen = {}
    for v in seq:
        seen.setdefault(v, None)
    return list(seen)


def table_cells(records) -> dict[str, dict]:
    """Group eval records into ``{table: {"rows", "cols", "corner", "cells"}}``.

    Records sharing a (table, row, col) cell (e.g. several seeds) are pooled:
    the cell reports mean and 95% interval over all of their episodes.
    """
    tables: dict[str, dict] = {}
    for rec in records:
        if rec.get("kind") != "eval" or not rec.get("table"):
            continue
        t = tables.setdefault(rec["table"], {"rows": [], "cols": [], "corner": rec.get("corner", ""),
                                             "acc": {}})
        t["rows"].append(rec["row"])
        t["cols"].append(rec["col"])
        t["acc"].setdefault((rec["row"], rec["col"]), []).extend(rec["accuracies"])
    out = {}
    for name, t in tables.items():
        cells = {k: summarize(np.asarray(v) / 100.0) for k, v in t["acc"].items()}
        out[name] = {"rows": _ordered(t["rows"]), "cols": _ordered(t["cols"]), "corner": t["corner"],
                     "cells": cells}
    return out


def render_table_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([table["corner"]] + table["cols"])
    for r in table["rows"]:
        row = [r]
        for c in table["cols"]:
            rep = table["cells"].get((r, c))
            row.append("" if rep is None else rep.cell())
        w.writerow(row)
    return buf.getvalue()


def render_tables(run_dir) -> list[Path]:
    """(Re)write ``tables/*.csv`` of a run directory from its metrics log."""
    rd = run_dir if isinstance(run_dir, RunDir) else RunDir.open(run_dir)
    tables = table_cells(rd.records())
    rd.tables.mkdir(exist_ok=True)
    written = []
    for name in sorted(tables):
        p = rd.tables / f"{name}.csv"
        p.write_text(render_table_csv(tables[name]))
        written.append(p)
    return written


# ----------------------------------------------------------------- embeddings


def write_embeddings(path, embeddings, labels) -> Path:
    """Binary dump: header (magic, version, count, dim, dtype tag), row-major
    values, then ``count`` int32 labels; all little-endian."""
    X = np.asarray(embeddings)
    if X.dtype not in _DTYPE_TAGS:
        X = X.astype(np.float32)
    y = np.asarray(labels, dtype="<i4")
    if X.ndim != 2 or len(y) != len(X):
        raise ValueError(f"expected (count, dim) embeddings with matching labels, got {X.shape} / {y.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, X.shape[0], X.shape[1], _DTYPE_TAGS[X.dtype]))
        fh.write(X.astype(X.dtype.newbyteorder("<"), copy=False).tobytes())
        fh.write(y.tobytes())
    return path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, version, n, d, tag = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise ValueError(f"{path} is not an embedding dump")
    if version != EMB_VERSION:
        raise ValueError(f"{path}: unsupported embedding dump version {version}")
    dtype = {v: k for k, v in _DTYPE_TAGS.items()}[tag].newbyteorder("<")
    off = _EMB_HEADER.size
    X = np.frombuffer(raw, dtype=dtype, count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off + n * d * dtype.itemsize)
    return X.copy(), y.astype(np.int64)
