"""Checkpoint file format.

Layout (little-endian): ``b"DCKPT1"``, u32 metadata length, UTF-8 JSON
metadata, u32 entry count, then per entry u32 name length, UTF-8 name,
u32 rank, rank x u32 extents, u64 byte offset into the payload; finally the
concatenated float32 payload. Writes go to a temporary file that is renamed
into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MAGIC = b"DCKPT1"


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> str:
    """Write a checkpoint atomically and return its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    header = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    payload = []
    offset = 0
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        header.append(struct.pack("<I", len(nb)) + nb)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<Q", offset))
        raw = arr.tobytes()
        payload.append(raw)
        offset += len(raw)
    blob = b"".join(header) + b"".join(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:6] != MAGIC:
        raise ConfigError(f"{path} is not a DCKPT1 checkpoint")
    pos = 6
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, shape, offset))
    params = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = pos + offset
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).astype(np.float32).reshape(shape)
    return params, meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()
