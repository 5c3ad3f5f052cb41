#!/usr/bin/env python3
"""
Prototype Memory

A small learnable bank of K global descriptors that acts as a set of shape
anchors:
- retrieve: nearest prototype by squared L2 (lowest index on ties), O(Kd)
- confidence_alpha / confidence_entropy: fusion weight in [0, 1]
- fuse: F' = (1 - alpha) F + alpha P
- commitment_loss: VQ-style objective with stop-gradient routing
- reseed_dead / init_bank: keep every row in use

During training the query is the GT descriptor; at inference it is the
partial descriptor. bank.last_branch records which one was used last.
"""

import math
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

sys.path.insert(0, str(Path(__file__).parent))

MAX_PROTOTYPES = 128  # K must stay below this (O(Kd) retrieval budget)

CONFIDENCE_MODES = ("similarity", "entropy")


def check_bank_size(K: int) -> None:
    if not 1 <= K < MAX_PROTOTYPES:
        raise ValueError(f"K must be in [1, {MAX_PROTOTYPES}), got {K}")


class PrototypeBank(nn.Module):
    """K x d learnable prototypes plus per-row usage counters"""

    def __init__(self, K: int, d: int):
        super().__init__()
        check_bank_size(K)
        self.vectors = nn.Parameter(torch.zeros(K, d))

        # Hits since the last reseed check; not a parameter, never checkpointed
        self.usage = np.zeros(K, dtype=np.int64)
        self.last_branch: Optional[str] = None
        self.last_reseeded: List[int] = []
        self._usage_lock = threading.Lock()

    @property
    def K(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def assign(self, rows: Union[np.ndarray, torch.Tensor]) -> None:
        """Overwrite all rows (shape must match)"""
        rows = torch.as_tensor(rows, dtype=self.vectors.dtype)
        if rows.shape != self.vectors.shape:
            raise ValueError(f"bank rows must have shape {tuple(self.vectors.shape)}, got {tuple(rows.shape)}")
        with torch.no_grad():
            self.vectors.copy_(rows)

    def record_hits(self, indices: Sequence[int]) -> None:
        with self._usage_lock:
            np.add.at(self.usage, np.asarray(indices, dtype=np.int64), 1)

    def __repr__(self) -> str:
        return f"PrototypeBank(K={self.K}, d={self.d}, used_rows={int((self.usage > 0).sum())})"


@dataclass
class RetrievalResult:
    """Outcome of one nearest-prototype lookup"""

    index: int
    prototype: torch.Tensor   # detached copy of the row
    sq_distance: float
    alpha: float


def squared_distances(vectors: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    """(..., K) squared L2 distances from each query (..., d) to every row"""
    diff = queries.unsqueeze(-2) - vectors
    return (diff * diff).sum(dim=-1)


def lowest_argmin(values: torch.Tensor) -> torch.Tensor:
    """argmin over the last dim, lowest index on exact ties"""
    K = values.shape[-1]
    hit = values == values.min(dim=-1, keepdim=True).values
    positions = torch.arange(K).expand_as(values)
    return positions.masked_fill(~hit, K).min(dim=-1).values


def confidence_alpha(sq_distance, tau: float):
    """alpha = exp(-sq_distance / tau); 1 at an exact hit, decreasing in distance"""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if isinstance(sq_distance, torch.Tensor):
        return torch.exp(-sq_distance / tau)
    return math.exp(-float(sq_distance) / tau)


def confidence_entropy(sq_distances: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Entropy-based confidence over all K distances

    p = softmax(-d / tau); alpha = 1 - H(p) / log K. A peaked assignment
    gives alpha near 1, a uniform one gives 0. K = 1 gives 1.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    K = sq_distances.shape[-1]
    if K == 1:
        return torch.ones(sq_distances.shape[:-1], dtype=sq_distances.dtype)
    p = torch.softmax(-sq_distances / tau, dim=-1)
    entropy = -torch.special.xlogy(p, p).sum(dim=-1)
    return (1 - entropy / math.log(K)).clamp(0.0, 1.0)


def _confidence(sq_all: torch.Tensor, sq_min: torch.Tensor, tau: float, mode: str) -> torch.Tensor:
    if mode == "similarity":
        return confidence_alpha(sq_min, tau)
    if mode == "entropy":
        return confidence_entropy(sq_all, tau)
    raise ValueError(f"Unknown confidence mode '{mode}' (expected one of {CONFIDENCE_MODES})")


def retrieve_batch(bank: PrototypeBank, queries: torch.Tensor, tau: float,
                   branch: str = "partial", confidence: str = "similarity",
                   record: bool = True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Nearest prototype for each of B queries

    Args:
        queries: (B, d)
        branch: "gt" (training path) or "partial" (inference path)
        record: Count the hits toward bank.usage

    Returns:
        (indices (B,), sq_distances (B,), alpha (B,)), all without gradient
    """
    if queries.dim() != 2 or queries.shape[1] != bank.d:
        raise ValueError(f"query dimension mismatch: expected (B, {bank.d}), got {tuple(queries.shape)}")

    with torch.no_grad():
        sq_all = squared_distances(bank.vectors, queries.detach())
        indices = lowest_argmin(sq_all)
        sq_min = sq_all.gather(1, indices.unsqueeze(1)).squeeze(1)
        alpha = _confidence(sq_all, sq_min, tau, confidence)

    if record:
        bank.record_hits(indices.tolist())
    bank.last_branch = branch
    return indices, sq_min, alpha


def retrieve(bank: PrototypeBank, query: torch.Tensor, tau: float,
             branch: str = "partial", confidence: str = "similarity",
             record: bool = True) -> RetrievalResult:
    """Nearest prototype for a single (d,) query"""
    if query.dim() != 1 or query.shape[0] != bank.d:
        raise ValueError(f"query dimension mismatch: expected ({bank.d},), got {tuple(query.shape)}")

    indices, sq, alpha = retrieve_batch(bank, query.unsqueeze(0), tau, branch, confidence, record)
    index = int(indices[0])
    return RetrievalResult(
        index=index,
        prototype=bank.vectors[index].detach().clone(),
        sq_distance=float(sq[0]),
        alpha=float(alpha[0]),
    )


def fuse(f: torch.Tensor, proto: torch.Tensor, alpha) -> torch.Tensor:
    """
    Confidence-gated fusion F' = (1 - alpha) f + alpha proto

    alpha is a float or a (B,) tensor for batched (B, d) inputs; it is
    treated as a constant, so f gets factor (1 - alpha) and proto gets alpha.
    """
    if f.shape != proto.shape:
        raise ValueError(f"fuse shape mismatch: {tuple(f.shape)} vs {tuple(proto.shape)}")

    if isinstance(alpha, torch.Tensor):
        alpha = alpha.detach()
        if bool(((alpha < 0) | (alpha > 1)).any()):
            raise ValueError("alpha must lie in [0, 1]")
        if alpha.dim() == 1 and f.dim() == 2:
            alpha = alpha.unsqueeze(1)
        alpha = alpha.to(f.dtype)
    elif not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")

    return (1 - alpha) * f + alpha * proto


def commitment_loss(f_gt: torch.Tensor, proto: torch.Tensor,
                    frozen_f: Optional[torch.Tensor] = None,
                    frozen_proto: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    VQ commitment objective |sg(f_gt) - proto|^2 + |f_gt - sg(proto)|^2

    Gradients: 2 (f_gt - proto) to f_gt (second term only) and
    2 (proto - f_gt) to proto (first term only). Batched inputs are
    averaged over the batch.

    frozen_f / frozen_proto replace the stop-gradient operands with fixed
    values; finite-difference checks use them to evaluate the surrogate
    whose gradient the routing defines.
    """
    if f_gt.shape != proto.shape:
        raise ValueError(f"commitment shape mismatch: {tuple(f_gt.shape)} vs {tuple(proto.shape)}")

    sg_f = frozen_f if frozen_f is not None else f_gt.detach()
    sg_proto = frozen_proto if frozen_proto is not None else proto.detach()

    loss = ((sg_f - proto) ** 2).sum(dim=-1) + ((f_gt - sg_proto) ** 2).sum(dim=-1)
    return loss.mean() if loss.dim() > 0 else loss


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, torch.Tensor):
        return features.detach().cpu().double().numpy().reshape(-1, features.shape[-1])
    if len(features) == 0:
        return np.empty((0, 0))
    return np.stack([np.asarray(f.detach().cpu().double() if isinstance(f, torch.Tensor) else f,
                                dtype=np.float64) for f in features])


def _make_distinct(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Nudge exact duplicate rows apart"""
    scale = float(np.abs(rows).mean()) or 1.0
    for _ in range(10):
        _, first = np.unique(rows, axis=0, return_index=True)
        if len(first) == len(rows):
            break
        dup = np.setdiff1d(np.arange(len(rows)), first)
        rows[dup] += rng.normal(0, 1e-6 * scale, size=(len(dup), rows.shape[1]))
    return rows


def initial_rows(K: int, d: int, warmup_features, seed: int) -> np.ndarray:
    """
    Starting prototypes

    - >= K warmup features: k-means++ seeding over them
    - fewer (but some): Gaussian with the warmup mean / std
    - none: unit Gaussian
    """
    check_bank_size(K)
    rng = np.random.default_rng(seed)
    feats = _as_matrix(warmup_features)
    n = feats.shape[0]

    if n >= K:
        if feats.shape[1] != d:
            raise ValueError(f"warmup features have dimension {feats.shape[1]}, expected {d}")
        chosen = [int(rng.integers(n))]
        min_sq = np.sum((feats - feats[chosen[0]]) ** 2, axis=1)
        for _ in range(1, K):
            total = min_sq.sum()
            if total > 0:
                nxt = int(rng.choice(n, p=min_sq / total))
            else:
                remaining = np.setdiff1d(np.arange(n), chosen)
                nxt = int(rng.choice(remaining))
            chosen.append(nxt)
            min_sq = np.minimum(min_sq, np.sum((feats - feats[nxt]) ** 2, axis=1))
        rows = feats[chosen].copy()
    elif n > 0:
        mean = feats.mean(axis=0)
        std = feats.std(axis=0) + 1e-6
        rows = mean + std * rng.normal(size=(K, d))
    else:
        rows = rng.normal(size=(K, d))

    return _make_distinct(rows, rng)


def init_bank(K: int, d: int, warmup_features, seed: int,
              dtype: torch.dtype = torch.float32) -> PrototypeBank:
    """New bank seeded from one warmup epoch of GT descriptors"""
    bank = PrototypeBank(K, d).to(dtype)
    bank.assign(initial_rows(K, d, warmup_features, seed))
    return bank


def _distinct_from_bank(bank: PrototypeBank, dead: np.ndarray, rows: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Nudge replacement rows until no two bank rows coincide (compared in the bank dtype)"""
    dtype = bank.vectors.detach().cpu().numpy().dtype
    current = bank.vectors.detach().cpu().numpy().copy()
    scale = float(np.abs(rows).mean()) or 1.0
    for _ in range(10):
        current[dead] = rows.astype(dtype)
        # Survivors keep their values; only the replacement rows move
        clash_rows = [i for i, k in enumerate(dead)
                      if int(np.all(current == current[k], axis=1).sum()) > 1]
        if not clash_rows:
            break
        rows[clash_rows] += rng.normal(0, 1e-4 * scale, size=(len(clash_rows), rows.shape[1]))
    return rows


def reseed_dead(bank: PrototypeBank, recent_features, min_hits: int, seed: int,
                noise_scale: float = 1e-2) -> int:
    """
    Replace rows hit fewer than min_hits times since the last check

    Each dead row becomes a random recent GT feature plus small seeded
    noise. Usage counters are reset afterwards.

    Returns:
        Number of reseeded rows (their indices are kept in bank.last_reseeded)
    """
    feats = _as_matrix(recent_features)
    if feats.shape[0] == 0:
        raise ValueError("reseed_dead needs at least one recent feature")

    dead = np.flatnonzero(bank.usage < min_hits)
    bank.last_reseeded = dead.tolist()
    if len(dead) > 0:
        rng = np.random.default_rng(seed)
        picks = rng.choice(feats.shape[0], size=len(dead), replace=len(dead) > feats.shape[0])
        spread = float(feats.std(axis=0).mean()) or 1.0
        rows = feats[picks] + rng.normal(0, noise_scale * spread, size=(len(dead), feats.shape[1]))
        rows = _distinct_from_bank(bank, dead, rows, rng)
        with torch.no_grad():
            bank.vectors[torch.as_tensor(dead)] = torch.as_tensor(rows, dtype=bank.vectors.dtype)

    bank.usage[:] = 0
    return int(len(dead))


if __name__ == "__main__":
    # Quick test
    bank = init_bank(K=4, d=2, warmup_features=[], seed=0)
    result = retrieve(bank, bank.vectors[2].detach().clone(), tau=1.0)
    print(f"Exact hit: index={result.index}, sq={result.sq_distance}, alpha={result.alpha}")
    print(f"fuse((1,0), (0,1), 0.25) = {fuse(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]), 0.25)}")
    print("\n✅ Done")
