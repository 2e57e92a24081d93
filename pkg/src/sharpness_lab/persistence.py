"""CSV records and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"ASAMCKPT"              8 bytes
    version                  u8
    len(model spec text)     u32, then UTF-8 text
    len(metadata JSON)       u32, then UTF-8 JSON
    parameter count          u64, then that many float64 values
"""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import ModelSpec, ParameterVector, build_layout

__all__ = [
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "format_value",
    "parse_value",
    "write_csv",
    "read_csv",
]

MAGIC = b"ASAMCKPT"
VERSION = 1

_INT_RE = re.compile(r"^[+-]?\d+$")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    spec: ModelSpec
    params: ParameterVector
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    spec_text = ckpt.spec.to_text().encode("utf-8")
    meta = json.dumps(ckpt.metadata, sort_keys=True, allow_nan=True).encode("utf-8")
    values = np.ascontiguousarray(ckpt.params.values, dtype="<f8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<B", ckpt.version),
            struct.pack("<I", len(spec_text)),
            spec_text,
            struct.pack("<I", len(meta)),
            meta,
            struct.pack("<Q", values.size),
            values.tobytes(),
        ]
    )


def decode_checkpoint(raw: bytes) -> Checkpoint:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=pos - 1)
    (n_spec,) = struct.unpack("<I", take(4, "spec length"))
    spec_at = pos
    try:
        spec = ModelSpec.from_text(take(n_spec, "model spec").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad model spec: {exc}", offset=spec_at) from None
    (n_meta,) = struct.unpack("<I", take(4, "metadata length"))
    meta_at = pos
    try:
        metadata = json.loads(take(n_meta, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad metadata: {exc}", offset=meta_at) from None
    count_at = pos
    (count,) = struct.unpack("<Q", take(8, "parameter count"))
    layout = build_layout(spec)
    if count != layout.k:
        raise FormatError(f"parameter count {count} does not match model ({layout.k})", offset=count_at)
    values = np.frombuffer(take(8 * count, "parameters"), dtype="<f8").astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after parameters", offset=pos)
    return Checkpoint(spec, ParameterVector(values, layout), metadata, version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        text = format(float(value), ".17g")
        # keep floats distinguishable from ints so "-0.0" and "3.0" survive parsing
        return text + ".0" if _INT_RE.match(text) else text
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def parse_value(text: str):
    if text == "":
        return None
    if _INT_RE.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def write_csv(path, rows, fieldnames=None, append: bool = False) -> Path:
    """Write dict rows with a header; floats keep 17 significant digits.

    With ``append=True`` rows are added to an existing file, whose header
    must match.
    """
    path = Path(path)
    rows = list(rows)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    exists = append and path.exists() and path.stat().st_size > 0
    if exists:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        if header != list(fieldnames):
            raise FormatError(f"{path}: header {header} does not match {list(fieldnames)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if exists else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not exists:
            writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([format_value(row.get(k)) for k in fieldnames])
    return path


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: parse_value(v) for k, v in row.items()} for row in reader]
