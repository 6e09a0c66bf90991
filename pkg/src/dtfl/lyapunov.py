"""Resource deficit queue and the drift-plus-penalty value used as reward."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence


@dataclass(frozen=True)
class DeficitQueue:
    budget_total: float
    budget_fraction: float
    horizon: int
    q: float = 0.0
    consumed: float = 0.0

    def __post_init__(self):
        if self.q < 0:
            raise ValueError("queue backlog cannot be negative")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must lie in (0, 1]")

    @property
    def budget(self) -> float:
        return self.budget_fraction * self.budget_total

    @property
    def slot_budget(self) -> float:
        """Resource available per planned aggregation, beta * R_m / k."""
        return self.budget / self.horizon


@dataclass(frozen=True)
class PenaltyWeights:
    v0: float = 10.0
    v_growth: float = 0.02

    def __post_init__(self):
        if self.v0 <= 0 or self.v_growth < 0:
            raise ValueError("need v0 > 0 and v_growth >= 0")

    @property
    def v(self) -> float:
        return self.v0


def queue_update(queue: DeficitQueue, a_i: int, e_cmp: float, e_com: float) -> DeficitQueue:
    used = float(a_i * e_cmp + e_com)
    return replace(queue, q=max(queue.q + used - queue.slot_budget, 0.0), consumed=queue.consumed + used)


def drift_penalty_value(weights: PenaltyWeights | float, loss_prev: float, loss_cur: float,
                        queue: DeficitQueue | float, a_i: int, e_cmp: float, e_com: float) -> float:
    """``v * (loss drop) - Q * (consumption)`` with the backlog before the update."""
    v = weights.v if isinstance(weights, PenaltyWeights) else float(weights)
    q = queue.q if isinstance(queue, DeficitQueue) else float(queue)
    return v * (loss_prev - loss_cur) - q * (a_i * e_cmp + e_com)


def budget_exhausted(queue: DeficitQueue) -> bool:
    return queue.consumed > queue.budget


def v_schedule(weights: PenaltyWeights, aggregation_index: int) -> float:
    if aggregation_index < 0:
        raise ValueError("aggregation_index must be non-negative")
    return weights.v0 * (1.0 + weights.v_growth * aggregation_index)


def decompose_training_gain(loss_trace: Sequence[float]) -> list[float]:
    if len(loss_trace) < 2:
        raise ValueError("need at least two losses")
    return [float(loss_trace[i - 1] - loss_trace[i]) for i in range(1, len(loss_trace))]
