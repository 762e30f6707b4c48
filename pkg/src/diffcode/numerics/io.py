"""Portable tensor file format.

Layout: ``b"DFT1"``, u32 rank, ``rank`` u32 extents, then a little-endian
float32 payload in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import ContractError
from .tensor import Tensor

MAGIC = b"DFT1"


def write_tensor(fh: BinaryIO, x) -> None:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f4")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ContractError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return Tensor(arr)


def save_tensor(path: str | Path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(x) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()
