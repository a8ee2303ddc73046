"""Training objectives: cross-entropies, total pairwise confusion, weighted total."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, softmax_cross_entropy, stack, tsum

__all__ = [
    "LossWeights",
    "PairBatch",
    "anti_loss",
    "recg_loss",
    "tpc_loss",
    "pair_sampler",
    "disjoint_pairs",
    "total_loss",
    "LossLog",
]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # recognition
    lambda2: float = 2.5e-5  # pairwise confusion

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ContractError(f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")


@dataclass
class PairBatch:
    """Stacked pair members: row k of ``left`` is paired with row k of ``right``."""

    left: Tensor
    right: Tensor

    @property
    def M(self):
        return self.left.shape[0]

    @classmethod
    def from_features(cls, features: Tensor, pairs):
        """Gather pairs of rows from an N×d feature tensor (e.g. the fc2 tap)."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise ContractError("a sample cannot be paired with itself")
        return cls(features[pairs[:, 0]], features[pairs[:, 1]])

    @classmethod
    def from_list(cls, pairs):
        if not pairs:
            raise ContractError("pair batch is empty")
        return cls(stack([a for a, _ in pairs]), stack([b for _, b in pairs]))


def anti_loss(logits, liveness):
    return softmax_cross_entropy(logits, liveness)


def recg_loss(logits, identities):
    return softmax_cross_entropy(logits, identities)


def tpc_loss(batch: PairBatch, reduction="sum"):
    """Sum over pairs of the squared Euclidean distance between pair members.

    ``reduction="mean"`` divides by the pair count; the default is the plain sum.
    """
    left, right = batch.left, batch.right
    if left.ndim == 0 or left.shape[0] == 0:
        raise ContractError("pair batch is empty")
    if left.shape != right.shape:
        raise ShapeError(f"pair members differ in extent: {left.shape} vs {right.shape}")
    diff = left - right
    loss = tsum(diff * diff)
    if reduction == "mean":
        return loss * (1.0 / left.shape[0])
    if reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return loss


def pair_sampler(batch_indices, M, seed):
    """``M`` pairs (i, j), i != j, drawn uniformly over unordered pairs of the batch.

    Labels play no role: pairs mix live and attack samples freely.
    """
    batch_indices = np.asarray(batch_indices)
    n = batch_indices.size
    if n < 2:
        raise ContractError(f"pair sampling needs a batch of >= 2, got {n}")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, size=M)
    second = rng.integers(0, n - 1, size=M)
    second = second + (second >= first)  # skip the diagonal, uniform over j != i
    return np.stack([batch_indices[first], batch_indices[second]], axis=1)


def disjoint_pairs(n, rng):
    """floor(n/2) disjoint pairs from a random permutation of range(n)."""
    if n < 2:
        raise ContractError(f"pair sampling needs a batch of >= 2, got {n}")
    perm = rng.permutation(n)
    m = n // 2
    return np.stack([perm[:m], perm[m:2 * m]], axis=1)


def total_loss(anti, recg, tpc, w: LossWeights):
    """anti + lambda1 * recg + lambda2 * tpc; accepts floats or scalar tensors."""
    parts = [anti, recg, tpc]
    for part in parts:
        value = part.item() if isinstance(part, Tensor) else float(part)
        if not math.isfinite(value):
            raise ContractError(f"loss component is not finite: {value}")
    if not any(isinstance(p, Tensor) for p in parts):
        return anti + w.lambda1 * recg + w.lambda2 * tpc
    return anti + recg * w.lambda1 + tpc * w.lambda2


class LossLog:
    """Per-step loss record, written as ``step,anti,recg,tpc,total`` CSV."""

    columns = ("step", "anti", "recg", "tpc", "total")

    def __init__(self):
        self.rows = []

    def append(self, step, anti, recg, tpc, total):
        self.rows.append((int(step), float(anti), float(recg), float(tpc), float(total)))

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([row[0], *(repr(v) for v in row[1:])])
