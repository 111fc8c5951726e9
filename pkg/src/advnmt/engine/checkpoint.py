"""NTC1 checkpoint container.

Layout (all integers little-endian)::

    b"NTC1"
    u32 format version
    u32 metadata length, UTF-8 JSON metadata  {"entries": [...names...], ...}
    per entry:
        u32 name length, UTF-8 name
        u8  dtype tag (1 = f32)
        u32 ndim, ndim x u32 dims
        payload, little-endian f32, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"NTC1"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


def save(path, entries: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["entries"] = list(entries)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an NTC1 checkpoint")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    off = 12
    meta = json.loads(buf[off:off + mlen].decode("utf-8"))
    off += mlen
    entries: Dict[str, np.ndarray] = {}
    for expected in meta.get("entries", []):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        tag, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        if tag != DTYPE_F32:
            raise CheckpointError(f"{path}: entry {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        if name != expected:
            raise CheckpointError(f"{path}: entry order mismatch, found {name!r} expected {expected!r}")
        entries[name] = arr.astype(np.float32)
    return meta, entries
