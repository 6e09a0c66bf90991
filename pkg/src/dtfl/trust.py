"""Subjective-logic reputation and trust-weighted aggregation.

A curator scores each upload by transmission reliability, learning quality,
twin deviation and interaction history, accumulates those beliefs into a
reputation, and averages parameters in proportion to reputation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AllUntrusted
from .model import ModelParams

DEVIATION_FLOOR = 1e-3


@dataclass(frozen=True)
class Upload:
    node_id: int
    params: ModelParams
    timestamp: int
    failure_prob: float

    def __post_init__(self):
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError(f"failure_prob {self.failure_prob} outside [0, 1]")


@dataclass(frozen=True)
class ReputationRecord:
    curator_id: int
    node_id: int
    alpha: float = 1.0
    beta: float = 1.0
    uncertainty_coeff: float = 0.5
    history: tuple[tuple[float, float, float], ...] = field(default=())

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("interaction counts must be non-negative")
        if not 0.0 <= self.uncertainty_coeff <= 1.0:
            raise ValueError("uncertainty coefficient must lie in [0, 1]")


def _distances_to_mean(uploads: Sequence[Upload]) -> np.ndarray:
    stack = np.stack([u.params.flat for u in uploads])
    center = stack.mean(axis=0)
    return np.linalg.norm(stack - center, axis=1)


def learning_quality(uploads: Sequence[Upload]) -> dict[int, float]:
    """Each node's share of the total L2 distance from the mean upload.

    Falls back to uniform shares when every upload is identical.
    """
    if not uploads:
        raise ValueError("need at least one upload")
    d = _distances_to_mean(uploads)
    total = d.sum()
    n = len(uploads)
    if total <= 0.0:
        return {u.node_id: 1.0 / n for u in uploads}
    return {u.node_id: float(di / total) for u, di in zip(uploads, d)}


def consensus_quality(uploads: Sequence[Upload], eps: float = 1e-12) -> dict[int, float]:
    """Inverse-distance shares around the coordinate-wise median upload.

    Nodes that agree with the bulk of the cluster score high; an outlier
    cannot drag the reference point toward itself the way it drags a mean.
    Sums to one, uniform when all uploads coincide.
    """
    if not uploads:
        raise ValueError("need at least one upload")
    n = len(uploads)
    stack = np.stack([u.params.flat for u in uploads])
    d = np.linalg.norm(stack - np.median(stack, axis=0), axis=1)
    if np.all(d <= eps):
        return {u.node_id: 1.0 / n for u in uploads}
    inv = 1.0 / np.maximum(d, max(eps, float(d[d > eps].min()) * 1e-3))
    inv /= inv.sum()
    return {u.node_id: float(v) for u, v in zip(uploads, inv)}


def belief(u: float, q: float, deviation: float, alpha: float, beta: float,
           deviation_floor: float = DEVIATION_FLOOR) -> float:
    if alpha + beta <= 0:
        raise ValueError("alpha + beta must be positive")
    return (1.0 - u) * q / max(deviation, deviation_floor) * (alpha / (alpha + beta))


def reputation(record: ReputationRecord, window: int | None = None) -> float:
    """Sum of ``b + iota * u`` over the record's (optionally truncated) history."""
    hist = record.history if window is None else record.history[-window:]
    iota = record.uncertainty_coeff
    return float(sum(b + iota * u for b, u, _ in hist))


def trust_weighted_aggregate(uploads: Sequence[Upload], reputations: Mapping[int, float]) -> ModelParams:
    """Reputation-weighted mean of each node's latest upload."""
    if not uploads:
        raise ValueError("need at least one upload")
    latest: dict[int, Upload] = {}
    for up in uploads:
        cur = latest.get(up.node_id)
        if cur is None or up.timestamp >= cur.timestamp:
            latest[up.node_id] = up
    ids = sorted(latest)
    weights = np.array([max(float(reputations.get(i, 0.0)), 0.0) for i in ids])
    total = weights.sum()
    if total <= 0.0:
        raise AllUntrusted("every uploading node has zero reputation")
    stack = np.stack([latest[i].params.flat for i in ids])
    merged = (weights / total) @ stack
    return latest[ids[0]].params.with_flat(merged)


def _cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    cos = unit @ unit.T
    zero = norms == 0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    return cos


def gradient_diversity_flags(uploads: Sequence[Upload], prev_global: ModelParams,
                             threshold: float = 0.99) -> set[int]:
    """Flag nodes whose update nearly duplicates another node's update.

    This is the similarity screen of FoolsGold without its history and
    pardoning terms: colluding copies share a direction, honest non-IID
    updates do not.
    """
    if len(uploads) < 2:
        raise ValueError("need at least two uploads to compare")
    deltas = np.stack([u.params.flat - prev_global.flat for u in uploads])
    cos = _cosine_matrix(deltas)
    np.fill_diagonal(cos, -np.inf)
    worst = cos.max(axis=1)
    return {u.node_id for u, c in zip(uploads, worst) if c > threshold}


def record_interaction(record: ReputationRecord, flagged: bool, b: float, u: float, q: float) -> ReputationRecord:
    if flagged:
        return replace(record, beta=record.beta + 1, history=record.history + ((b, u, q),))
    return replace(record, alpha=record.alpha + 1, history=record.history + ((b, u, q),))


class CuratorLedger:
    """Reputation records one curator keeps for its member nodes."""

    def __init__(self, curator_id: int, node_ids: Iterable[int], iota: float = 0.5, window: int | None = None):
        self.curator_id = curator_id
        self.iota = iota
        self.window = window
        self.records = {i: ReputationRecord(curator_id, i, uncertainty_coeff=iota) for i in node_ids}

    def reputation(self, node_id: int) -> float:
        rec = self.records[node_id]
        return reputation(rec, self.window) if rec.history else 0.0

    def reputations(self) -> dict[int, float]:
        return {i: self.reputation(i) for i in self.records}
