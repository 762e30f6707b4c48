"""Task-aware global routing: one gating vector per sample drives every expert layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import Tensor, concat, softmax

Expert = Callable[[Tensor], Tensor]


def topk(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries in descending order; ties go to the smaller index."""
    v = np.asarray(v)
    if not 1 <= k <= v.shape[-1]:
        raise ContractError(f"k={k} outside 1..{v.shape[-1]}")
    # stable sort on -v keeps equal logits in index order
    return np.argsort(-v, axis=-1, kind="stable")[..., :k]


@dataclass(eq=False)
class GatingVector:
    """Per-sample expert logits ``V`` with the activation count ``k``."""

    logits: Tensor  # [N, E]
    k: int = 1

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise DimensionError(f"gating logits must be [N, E], got {self.logits.shape}")
        if not 1 <= self.k <= self.num_experts:
            raise ContractError(f"k={self.k} outside 1..{self.num_experts}")

    @property
    def num_experts(self) -> int:
        return self.logits.shape[1]

    def selection(self) -> np.ndarray:
        """``[N, k]`` selected expert indices."""
        return topk(self.logits.data, self.k)

    def weights(self) -> Tensor:
        """``[N, k]`` softmax over the selected logits only."""
        sel = self.selection()
        rows = np.repeat(np.arange(self.logits.shape[0]), self.k)
        picked = self.logits[rows, sel.reshape(-1)].reshape(self.logits.shape[0], self.k)
        return softmax(picked, axis=1)


def route_argmax_invariance_check(gate: GatingVector, c: float, b: float = 0.0) -> bool:
    """True if the top-k selection survives ``V -> c V + b`` for ``c > 0``."""
    if c <= 0:
        raise ContractError(f"scale must be positive, got {c}")
    v = gate.logits.data
    return bool(np.array_equal(topk(v, gate.k), topk(c * v + b, gate.k)))


@dataclass(eq=False)
class TarmLayer:
    """Mixture of shape-preserving experts evaluated only on the samples routed to them."""

    experts: Sequence[Expert]
    calls: list[int] = field(default_factory=list, repr=False)
    sample_evals: int = field(default=0, repr=False)
    seen_gates: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.experts:
            raise ContractError("TARM needs at least one expert")
        self.calls = [0] * len(self.experts)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def reset_counters(self) -> None:
        self.calls = [0] * len(self.experts)
        self.sample_evals = 0
        self.seen_gates = []


def tarm_forward(f_in: Tensor, gate: GatingVector, layer: TarmLayer) -> Tensor:
    """``sum_{e in TopK(V, k)} w_e A_e(f_in)`` per sample.

    Samples are grouped by selected expert so each expert runs once per call
    on its sub-batch; unselected experts are never evaluated.
    """
    if gate.num_experts != layer.num_experts:
        raise ContractError(f"gate has {gate.num_experts} experts, layer has {layer.num_experts}")
    n = f_in.shape[0]
    if gate.logits.shape[0] != n:
        raise DimensionError(f"gate batch {gate.logits.shape[0]} != feature batch {n}")
    layer.seen_gates.append(id(gate))
    sel = gate.selection()
    w = gate.weights()
    parts: list[Tensor] = []
    order: list[np.ndarray] = []
    for slot in range(gate.k):
        for e in range(layer.num_experts):
            rows = np.flatnonzero(sel[:, slot] == e)
            if rows.size == 0:
                continue
            layer.calls[e] += 1
            layer.sample_evals += rows.size
            out = layer.experts[e](f_in[rows] if rows.size < n else f_in)
            if gate.k > 1:
                ws = w[rows, slot].reshape((rows.size,) + (1,) * (out.ndim - 1))
                out = out * ws
            parts.append(out)
            order.append(rows + slot * n)
    stacked = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    perm = np.concatenate(order)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    # rows of `stacked` are in (slot, expert) order; undo that, then sum slots
    unsorted = stacked[inv] if not np.array_equal(perm, np.arange(perm.size)) else stacked
    if gate.k == 1:
        return unsorted
    total = unsorted[np.arange(n)]
    for slot in range(1, gate.k):
        total = total + unsorted[np.arange(slot * n, (slot + 1) * n)]
    return total
