"""Residual vector quantization and the per-task codebook bank.

Each task owns one codebook, shared across all RQ depths. A latent vector is
quantized by repeatedly snapping the current residual to its nearest code
and subtracting it; the quantized vector is the sum of the chosen codes.

RQ arithmetic runs in float64 regardless of the stored dtype so float32
codebooks quantize without accumulating rounding between depths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import Tensor, l1_loss, mse_loss, stop_gradient

SHARED_TASK = 0xFFFFFFFF
BOOK_MAGIC = b"DCB1"


@dataclass(eq=False)
class Codebook:
    codes: Tensor
    task_id: int
    reads: int = field(default=0, compare=False)

    def __post_init__(self):
        if not isinstance(self.codes, Tensor):
            self.codes = Tensor(self.codes, requires_grad=True)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ContractError(f"codebook needs shape [M>=1, C], got {self.codes.shape}")
        if not np.isfinite(self.codes.data).all():
            raise ContractError("codebook contains non-finite codes")

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def table(self) -> np.ndarray:
        self.reads += 1
        return self.codes.data


@dataclass
class RqResult:
    quantized: np.ndarray       # same layout as the input latent
    indices: np.ndarray         # [..., D] code index per depth
    residual_norms: np.ndarray  # [D] Frobenius norm of the residual left after each depth
    residuals: np.ndarray       # [D + 1, P, C] residual R^(d) entering depth d, plus the final one


class CodebookBank:
    """One codebook per task, or a single codebook shared by all tasks."""

    def __init__(self, books: list[Codebook], shared: bool = False):
        ids = [b.task_id for b in books]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate task ids in bank: {ids}")
        if shared and len(books) != 1:
            raise ContractError("a shared bank holds exactly one codebook")
        self.books = list(books)
        self.shared = shared
        self._by_task = {b.task_id: b for b in books}

    @classmethod
    def create(cls, tasks: list[int], size: int, dim: int, rng: np.random.Generator,
               shared: bool = False, dtype=np.float32) -> "CodebookBank":
        def fresh(tid):
            return Codebook(Tensor(rng.normal(0.0, 0.1, size=(size, dim)).astype(dtype), requires_grad=True), tid)

        if shared:
            return cls([fresh(SHARED_TASK)], shared=True)
        return cls([fresh(t) for t in tasks])

    def book_for(self, task_id: int) -> Codebook:
        if self.shared:
            return self.books[0]
        try:
            return self._by_task[int(task_id)]
        except KeyError:
            raise ContractError(f"no codebook registered for task {task_id}") from None

    @property
    def task_ids(self) -> list[int]:
        return [b.task_id for b in self.books]

    def parameters(self) -> list[Tensor]:
        return [b.codes for b in self.books]

    def __len__(self) -> int:
        return len(self.books)


# ---------------------------------------------------------------------------
# nearest-code search and residual quantization

def _sq_dists(vectors: np.ndarray, codes: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - codes[None, :, :]
    return np.einsum("pmc,pmc->pm", diff, diff)


def nearest_codes(vectors: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code for each row of ``vectors``; ties go to the smaller index."""
    if codes.shape[0] == 0:
        raise ContractError("empty codebook")
    if vectors.shape[-1] != codes.shape[1]:
        raise DimensionError(f"vector dim {vectors.shape[-1]} != code dim {codes.shape[1]}")
    return np.argmin(_sq_dists(vectors, codes), axis=1)


def nearest_code(vector, book: Codebook) -> tuple[int, np.ndarray]:
    v = np.asarray(vector.data if isinstance(vector, Tensor) else vector, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"nearest_code expects a single vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ContractError("query vector is not finite")
    codes = book.table().astype(np.float64)
    idx = int(nearest_codes(v[None, :], codes)[0])
    return idx, book.codes.data[idx].copy()


def rq_flat(vectors: np.ndarray, codes: np.ndarray, depth: int):
    """RQ of ``[P, C]`` vectors; returns ``(quantized, indices [P, D], residuals [D+1, P, C])``."""
    if depth < 1:
        raise ContractError(f"RQ depth must be >= 1, got {depth}")
    codes = codes.astype(np.float64)
    residual = vectors.astype(np.float64)
    quantized = np.zeros_like(residual)
    indices = np.empty((residual.shape[0], depth), dtype=np.int64)
    trace = [residual]
    for d in range(depth):
        idx = nearest_codes(residual, codes)
        delta = codes[idx]
        indices[:, d] = idx
        quantized = quantized + delta
        residual = residual - delta
        trace.append(residual)
    return quantized, indices, np.stack(trace)


def _to_rows(z: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """``[..., C, H, W]`` latent -> ``[P, C]`` rows in (leading, H, W) order."""
    c, h, w = z.shape[-3:]
    lead = z.shape[:-3]
    moved = np.moveaxis(z.reshape((-1, c, h, w)), 1, -1)  # [B, H, W, C]
    return moved.reshape(-1, c), lead + (h, w)


def _from_rows(rows: np.ndarray, grid: tuple[int, ...], c: int) -> np.ndarray:
    arr = rows.reshape(grid + (c,))
    return np.moveaxis(arr, -1, -3)


def rq_quantize(z, book: Codebook, depth: int) -> RqResult:
    """Residual-quantize a latent ``[C, H, W]`` (or batched ``[N, C, H, W]``) with one codebook."""
    arr = np.asarray(z.data if isinstance(z, Tensor) else z)
    if arr.ndim < 3:
        raise DimensionError(f"rq_quantize expects [.., C, H, W], got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError("latent is not finite")
    c = arr.shape[-3]
    rows, grid = _to_rows(arr)
    q, idx, trace = rq_flat(rows, book.table(), depth)
    quantized = _from_rows(q, grid, c).astype(arr.dtype)
    final_norms = np.sqrt((trace[1:] ** 2).sum(axis=(1, 2)))
    return RqResult(quantized=np.ascontiguousarray(quantized), indices=idx.reshape(grid + (depth,)),
                    residual_norms=final_norms, residuals=trace)


def rq_dequantize(indices: np.ndarray, book: Codebook, depth: int | None = None, dtype=None) -> np.ndarray:
    """Sum the codes named by ``indices [..., H, W, D]``; returns ``[..., C, H, W]``."""
    indices = np.asarray(indices)
    depth = indices.shape[-1] if depth is None else depth
    if indices.shape[-1] != depth:
        raise DimensionError(f"indices carry {indices.shape[-1]} depths, expected {depth}")
    codes = book.table()
    if indices.size and (indices.min() < 0 or indices.max() >= codes.shape[0]):
        raise ContractError("code index out of range")
    flat = indices.reshape(-1, depth)
    c64 = codes.astype(np.float64)
    total = np.zeros((flat.shape[0], codes.shape[1]))
    for d in range(depth):
        total = total + c64[flat[:, d]]
    out = _from_rows(total, indices.shape[:-1], codes.shape[1])
    return np.ascontiguousarray(out.astype(dtype or codes.dtype))


def lookup(book: Codebook, indices: np.ndarray) -> Tensor:
    """Differentiable ``Σ_d codes[indices[..., d]]`` in ``[N, C, H, W]`` layout."""
    n, h, w, depth = indices.shape
    picked = book.codes[indices.reshape(-1)]
    summed = picked.reshape(n * h * w, depth, book.dim).sum(axis=1)
    return summed.reshape(n, h, w, book.dim).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# training terms

def stage1_loss(i_hq: Tensor, i_hat: Tensor, z: Tensor, z_q: Tensor, delta: float = 0.25) -> Tensor:
    """Reconstruction L1 + codebook term + delta-weighted commitment term (all as means).

    The codebook term sees the encoder output through a stop-gradient, so it
    only moves codes; the commitment term sees the codes through one, so it
    only moves the encoder.
    """
    if delta <= 0:
        raise ContractError(f"delta must be positive, got {delta}")
    if z.shape != z_q.shape:
        raise DimensionError(f"latent shapes differ: {z.shape} vs {z_q.shape}")
    recon = l1_loss(i_hq, i_hat)
    codebook_term = mse_loss(stop_gradient(z), z_q)
    commitment = mse_loss(z, stop_gradient(z_q))
    return recon + codebook_term + delta * commitment


# ---------------------------------------------------------------------------
# initialisation and collapse handling

def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen]


def seed_codebook(latents: np.ndarray, size: int, depth: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over latent rows, spread across RQ depths.

    Codes for depth ``d`` are seeded from the residuals left after quantizing
    with the codes seeded for earlier depths, so deeper residuals (which are
    much smaller than raw latents) also have nearby codes.
    """
    latents = np.asarray(latents, dtype=np.float64)
    per = [size // depth + (1 if d < size % depth else 0) for d in range(depth)]
    residual = latents
    books: list[np.ndarray] = []
    for d in range(depth):
        if per[d] == 0:
            continue
        new = _kmeanspp(residual, per[d], rng)
        books.append(new)
        current = np.concatenate(books)
        residual = latents.copy()
        for _ in range(d + 1):
            residual = residual - current[nearest_codes(residual, current)]
    return np.concatenate(books)[:size]


class DeadCodeTracker:
    """Re-seed codes that have not been selected for ``patience`` consecutive updates."""

    def __init__(self, size: int, patience: int = 200):
        self.patience = patience
        self.idle = np.zeros(size, dtype=np.int64)

    def update(self, used: np.ndarray) -> np.ndarray:
        """Record one step's used indices; return indices of codes now considered dead."""
        self.idle += 1
        self.idle[np.unique(used)] = 0
        return np.flatnonzero(self.idle >= self.patience)

    def reseed(self, book: Codebook, dead: np.ndarray, candidates: np.ndarray, rng: np.random.Generator) -> None:
        if dead.size == 0:
            return
        pick = rng.integers(candidates.shape[0], size=dead.size)
        book.codes.data[dead] = candidates[pick].astype(book.codes.dtype)
        self.idle[dead] = 0


# ---------------------------------------------------------------------------
# serialization

def write_codebook(fh: BinaryIO, book: Codebook) -> None:
    codes = np.ascontiguousarray(book.codes.data, dtype="<f4")
    fh.write(BOOK_MAGIC)
    fh.write(struct.pack("<III", book.task_id & 0xFFFFFFFF, codes.shape[0], codes.shape[1]))
    fh.write(codes.tobytes())


def read_codebook(fh: BinaryIO) -> Codebook:
    magic = fh.read(4)
    if magic != BOOK_MAGIC:
        raise ContractError(f"bad codebook magic {magic!r}")
    task_id, m, c = struct.unpack("<III", fh.read(12))
    payload = fh.read(4 * m * c)
    if len(payload) != 4 * m * c:
        raise ContractError("truncated codebook payload")
    codes = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(m, c)
    return Codebook(Tensor(codes, requires_grad=True), task_id)


def write_bank(fh: BinaryIO, bank: CodebookBank) -> None:
    fh.write(struct.pack("<I", len(bank.books)))
    for book in bank.books:
        write_codebook(fh, book)


def read_bank(fh: BinaryIO) -> CodebookBank:
    (count,) = struct.unpack("<I", fh.read(4))
    books = [read_codebook(fh) for _ in range(count)]
    shared = count == 1 and books[0].task_id == SHARED_TASK
    return CodebookBank(books, shared=shared)


def save_bank(path, bank: CodebookBank) -> None:
    with open(path, "wb") as fh:
        write_bank(fh, bank)


def load_bank(path) -> CodebookBank:
    with open(path, "rb") as fh:
        return read_bank(fh)
