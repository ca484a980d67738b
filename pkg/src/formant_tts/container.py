"""Versioned binary container used for checkpoints and corpora.

Layout (all integers little-endian)::

    magic        8 bytes
    version      u32
    header_len   u32, then header as UTF-8 JSON (sorted keys)
    n_records    u32
    per record:  name_len u32, name UTF-8, dtype tag (b"f8" | b"i8"),
                 ndim u32, shape as ndim x u64, raw little-endian data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import LoadError

_DTYPES = {b"f8": np.dtype("<f8"), b"i8": np.dtype("<i8")}


def _tag(arr: np.ndarray) -> bytes:
    if np.issubdtype(arr.dtype, np.floating):
        return b"f8"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return b"i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(magic: bytes, version: int, header: dict,
           records: Iterable[tuple[str, np.ndarray]]) -> bytes:
    assert len(magic) == 8
    records = list(records)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(head)), head, struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        key = name.encode("utf-8")
        parts += [struct.pack("<I", len(key)), key, tag, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), raw]
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise LoadError(f"truncated file while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(blob: bytes, magic: bytes, version: int) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    r = _Reader(blob)
    found = r.take(8, "magic")
    if found != magic:
        raise LoadError(f"bad magic bytes {found!r}, expected {magic!r}")
    file_version, head_len = r.unpack("<II", "header")
    if file_version != version:
        raise LoadError(f"format version {file_version} not supported (expected {version})")
    try:
        header = json.loads(r.take(head_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"malformed header: {exc}") from exc
    (count,) = r.unpack("<I", "record count")
    records = []
    for i in range(count):
        what = f"record {i}"
        (name_len,) = r.unpack("<I", what)
        try:
            name = r.take(name_len, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError(f"malformed name in {what}") from exc
        tag = r.take(2, what)
        if tag not in _DTYPES:
            raise LoadError(f"unknown dtype tag {tag!r} in {what}")
        (ndim,) = r.unpack("<I", what)
        shape = r.unpack(f"<{ndim}Q", what)
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(n * 8, what), dtype=_DTYPES[tag]).reshape(shape)
        records.append((name, data.astype(data.dtype.newbyteorder("="))))
    if r.pos != len(blob):
        raise LoadError(f"{len(blob) - r.pos} trailing bytes after {count} records")
    return header, records


def write(path, magic: bytes, version: int, header: dict,
          records: Iterable[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(magic, version, header, records))


def read(path, magic: bytes, version: int) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return decode(blob, magic, version)
