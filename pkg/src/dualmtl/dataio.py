"""CSV and manifest I/O.

All floats are written with Python's shortest round-trip representation,
so files are byte-stable across runs and re-reading loses nothing. Every
write goes through a temp-file-then-rename so an interrupted run never
leaves a truncated artifact behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import SchemaError

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1


def format_float(x) -> str:
    return repr(float(x))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path: Path, header: list[str], rows) -> None:
    """Write rows of ints/floats/strings; floats get full precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        out = []
        for cell in row:
            if isinstance(cell, (float, np.floating)):
                out.append(format_float(cell))
            else:
                out.append(str(cell))
        writer.writerow(out)
    atomic_write_text(path, buf.getvalue())


def write_task_csv(path: Path, X: np.ndarray, y: np.ndarray) -> None:
    d = X.shape[1]
    header = [f"x{j + 1}" for j in range(d)] + ["y"]
    rows = (list(X[i]) + [y[i]] for i in range(X.shape[0]))
    write_csv(path, header, rows)


def read_task_csv(path: Path):
    """Read a task file back into (X, y), validating the header exactly."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if not header or header[-1] != "y":
            raise SchemaError(f"{path}: missing required column 'y'")
        d = len(header) - 1
        expected = [f"x{j + 1}" for j in range(d)]
        for got, want in zip(header[:-1], expected):
            if got != want:
                raise SchemaError(f"{path}: expected column '{want}', found '{got}'")
        if d < 1:
            raise SchemaError(f"{path}: no feature columns before 'y'")
        data = []
        for i, row in enumerate(reader):
            if len(row) != d + 1:
                raise SchemaError(f"{path}: row {i + 2} has {len(row)} fields, expected {d + 1}")
            try:
                data.append([float(v) for v in row])
            except ValueError as exc:
                raise SchemaError(f"{path}: row {i + 2}: {exc}") from None
    if not data:
        raise SchemaError(f"{path}: no data rows")
    arr = np.asarray(data, dtype=np.float64)
    return arr[:, :d], arr[:, d]


def write_manifest(out_dir: Path, payload: dict) -> Path:
    payload = {"schema_version": MANIFEST_SCHEMA_VERSION, **payload}
    path = Path(out_dir) / MANIFEST_NAME
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(data_dir: Path) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise SchemaError(f"{path}: not found; expected a dataset directory with a manifest")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise SchemaError(
            f"{path}: schema_version {payload.get('schema_version')!r} unsupported "
            f"(expected {MANIFEST_SCHEMA_VERSION})"
        )
    return payload
