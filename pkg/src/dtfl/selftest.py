"""Hand-computed formula checks shared by the CLI ``selftest`` and the test suite.

Each check evaluates one library formula on a small input whose answer
was worked out by hand (or by an independent closed form) and compares
at relative tolerance 1e-9.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dqn import Experience, QNetwork, q_target, td_loss
from .energy import ChannelAllocation, EnergyModel, SubChannel, comm_energy, compute_energy
from .federation import clamp_frequency, time_weighted_global_aggregate, tolerance_schedule, ToleranceSchedule
from .lyapunov import DeficitQueue, PenaltyWeights, decompose_training_gain, drift_penalty_value, queue_update, v_schedule
from .model import ModelParams
from .trust import ReputationRecord, Upload, belief, reputation, trust_weighted_aggregate

REL_TOL = 1e-9


@dataclass(frozen=True)
class Check:
    name: str
    expected: float
    compute: Callable[[], float]

    def run(self) -> tuple[bool, float]:
        got = float(self.compute())
        return math.isclose(got, self.expected, rel_tol=REL_TOL, abs_tol=1e-12), got


def _scalar_params(v: float) -> ModelParams:
    # 1x1x1 net: flat = [w1, b1, w2, b2]; only the first entry carries the value
    return ModelParams(np.array([v, 0.0, 0.0, 0.0]), 1, 1, 1)


def _belief_check() -> float:
    return belief(u=0.1, q=0.5, deviation=0.2, alpha=3, beta=1)


def _reputation_check() -> float:
    rec = ReputationRecord(0, 0, uncertainty_coeff=0.5, history=((1.0, 0.2, 0.3), (0.5, 0.1, 0.2)))
    return reputation(rec)


def _aggregate_check() -> float:
    ups = [Upload(0, _scalar_params(1.0), 0, 0.0), Upload(1, _scalar_params(4.0), 0, 0.0)]
    return trust_weighted_aggregate(ups, {0: 2.0, 1: 1.0}).flat[0]


def _comm_check() -> float:
    entry = SubChannel(0.5, 2.0, 3.0, 1.0, 1.0)
    return comm_energy(ChannelAllocation((entry, entry)), EnergyModel(1.0, 1.0, 1.0, 8.0))


def _queue_check() -> float:
    # slot budget beta*R/k = 0.5 * 50 / 10 = 2.5; consumption 1*3 + 1 = 4
    q = DeficitQueue(budget_total=50.0, budget_fraction=0.5, horizon=10, q=2.0)
    return queue_update(q, 1, 3.0, 1.0).q


def _penalty_check() -> float:
    return drift_penalty_value(PenaltyWeights(v0=10.0), 0.9, 0.7, 2.0, 3, 0.2, 0.4)


def _q_target_check() -> float:
    # 1 -> 1 -> 2 net with zero hidden weights: outputs equal the output bias
    net = QNetwork(ModelParams(np.array([0.0, 0.0, 0.0, 0.0, 0.5, 1.5]), 1, 1, 2))
    exp = Experience(np.zeros(1), 1, 1.0, np.zeros(1), False)
    return q_target(net, exp, 0.9)


def _td_check() -> float:
    net = QNetwork(ModelParams(np.array([0.0, 0.0, 0.0, 0.0, 0.5, 0.0]), 1, 1, 2))
    exp = Experience(np.zeros(1), 1, 0.0, np.zeros(1), True)
    return td_loss(net, [exp], [1.0])


def _staleness_check() -> float:
    return time_weighted_global_aggregate([_scalar_params(0.0), _scalar_params(1.0)], [5, 4], 5).flat[0]


def _staleness_oracle() -> float:
    w = (math.e / 2.0) ** -1
    return w / (1.0 + w)


CHECKS: tuple[Check, ...] = (
    Check("belief", 0.9 * 0.5 / 0.2 * 0.75, _belief_check),
    Check("reputation", 1.0 + 0.5 * 0.2 + 0.5 + 0.5 * 0.1, _reputation_check),
    Check("trust_aggregate", (2.0 * 1.0 + 1.0 * 4.0) / 3.0, _aggregate_check),
    Check("compute_energy", 3.0, lambda: compute_energy(3, EnergyModel(1e9, 2.0, 1.0, 1.0), 2e9)),
    Check("comm_energy", 2.0, _comm_check),
    Check("queue_update", 3.5, _queue_check),
    Check("drift_penalty", 0.0, _penalty_check),
    Check("v_schedule", 1.5, lambda: v_schedule(PenaltyWeights(1.0, 0.1), 5)),
    Check("training_gain_sum", 0.8, lambda: sum(decompose_training_gain([2.3, 1.8, 1.5]))),
    Check("q_target", 2.35, _q_target_check),
    Check("td_loss", 0.25, _td_check),
    Check("staleness_merge", _staleness_oracle(), _staleness_check),
    Check("clamp", 3.0, lambda: clamp_frequency(5, 2.0, 1.0, 7.0)),
    Check("tolerance", 0.7, lambda: tolerance_schedule(ToleranceSchedule(0.5, 0.05, 1.0), 4)),
)


def run_checks() -> list[tuple[str, bool, float, float]]:
    """Evaluate every check; returns ``(name, passed, expected, got)`` rows."""
    out = []
    for check in CHECKS:
        try:
            ok, got = check.run()
        except Exception:  # a crashing formula is a failed check, not a crashed suite
            ok, got = False, float("nan")
        out.append((check.name, ok, check.expected, got))
    return out
