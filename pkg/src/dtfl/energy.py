"""Computation/communication energy and the three-state uplink channel."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateChannel

CAPACITY_FLOOR = 1e-12


class ChannelStatus(enum.IntEnum):
    GOOD = 0
    MEDIUM = 1
    BAD = 2


@dataclass(frozen=True)
class EnergyModel:
    cycles_per_training: float = 1.0
    n_cmp: float = 0.05
    n_com: float = 0.3
    model_bits: float = 1.0

    def __post_init__(self):
        for name in ("cycles_per_training", "n_cmp", "n_com", "model_bits"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SubChannel:
    time_fraction: float
    bandwidth: float
    power: float
    gain: float
    noise: float

    def __post_init__(self):
        if not 0.0 <= self.time_fraction <= 1.0:
            raise ValueError("time fraction must lie in [0, 1]")
        if self.bandwidth <= 0 or self.noise <= 0:
            raise ValueError("bandwidth and noise power must be positive")
        if self.power < 0 or self.gain < 0:
            raise ValueError("power and gain must be non-negative")

    @property
    def capacity(self) -> float:
        return self.time_fraction * self.bandwidth * np.log2(1.0 + self.power * self.gain / self.noise)


@dataclass(frozen=True)
class ChannelAllocation:
    entries: tuple[SubChannel, ...]

    def __post_init__(self):
        if sum(e.time_fraction for e in self.entries) > 1.0 + 1e-12:
            raise ValueError("time fractions of one node exceed 1")

    @property
    def capacity(self) -> float:
        return float(sum(e.capacity for e in self.entries))


@dataclass(frozen=True)
class ChannelConfig:
    """Knobs for the uplink model. Noise means are in dB, per state."""

    p_good: float = 0.6
    stickiness: float = 0.5
    noise_db: tuple[float, float, float] = (0.1, 0.3, 0.5)
    failure_prob: tuple[float, float, float] = (0.05, 0.15, 0.30)
    noise_ref: float = 1.0
    subchannels: int = 2
    bandwidth: float = 1.0
    power: float = 1.0
    gain: float = 1.0
    jitter: bool = True
    fixed_state: int | None = None


@dataclass(frozen=True, eq=False)
class ChannelState:
    state: ChannelStatus
    transition: np.ndarray = field(repr=False)
    p_good: float = 0.6

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (3, 3) or np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0):
            raise ValueError("transition must be a 3x3 row-stochastic matrix")


def compute_energy(a_i: int, model: EnergyModel, cpu_freq: float) -> float:
    if cpu_freq <= 0:
        raise ValueError("cpu_freq must be positive")
    if a_i < 0:
        raise ValueError("a_i must be non-negative")
    return a_i * model.n_cmp * model.cycles_per_training / cpu_freq


def comm_energy(alloc: ChannelAllocation, model: EnergyModel) -> float:
    if not alloc.entries:
        raise ValueError("allocation has no sub-channels")
    cap = alloc.capacity
    if cap <= CAPACITY_FLOOR:
        raise DegenerateChannel("allocation has zero uplink capacity")
    return model.n_com * model.model_bits / cap


def comm_time(alloc: ChannelAllocation, model: EnergyModel) -> float:
    cap = alloc.capacity
    if cap <= CAPACITY_FLOOR:
        raise DegenerateChannel("allocation has zero uplink capacity")
    return model.model_bits / cap


def stationary_target(p_good: float) -> np.ndarray:
    rest = (1.0 - p_good) / 2.0
    return np.array([p_good, rest, rest])


def make_transition(p_good: float, stickiness: float = 0.8) -> np.ndarray:
    """``s*I + (1-s)*1 pi^T``: any stickiness keeps ``pi`` stationary."""
    if not 0.0 <= p_good <= 1.0:
        raise ValueError("p_good must lie in [0, 1]")
    if not 0.0 <= stickiness <= 1.0:
        raise ValueError("stickiness must lie in [0, 1]")
    pi = stationary_target(p_good)
    return stickiness * np.eye(3) + (1.0 - stickiness) * np.tile(pi, (3, 1))


def initial_channel(cfg: ChannelConfig, rng: np.random.Generator) -> ChannelState:
    trans = make_transition(cfg.p_good, cfg.stickiness)
    if cfg.fixed_state is not None:
        return ChannelState(ChannelStatus(cfg.fixed_state), np.eye(3), cfg.p_good)
    start = rng.choice(3, p=stationary_target(cfg.p_good))
    return ChannelState(ChannelStatus(int(start)), trans, cfg.p_good)


def step_channel(state: ChannelState, rng: np.random.Generator) -> ChannelState:
    row = np.asarray(state.transition)[int(state.state)]
    nxt = int(rng.choice(3, p=row))
    return ChannelState(ChannelStatus(nxt), state.transition, state.p_good)


def db_to_linear(db: float, reference: float = 1.0) -> float:
    return reference * 10.0 ** (db / 10.0)


def channel_params_for(state: ChannelState | ChannelStatus, cfg: ChannelConfig = ChannelConfig(),
                       rng: np.random.Generator | None = None) -> tuple[ChannelAllocation, float]:
    """Per-node sub-channel template and packet-failure probability for a state.

    With an ``rng`` the noise level is jittered as ``Poisson(10 * mean_db) / 10``
    around the state's mean; without one the mean is used as is.
    """
    status = state.state if isinstance(state, ChannelState) else ChannelStatus(state)
    mean_db = cfg.noise_db[int(status)]
    db = mean_db
    if rng is not None and cfg.jitter:
        db = rng.poisson(10.0 * mean_db) / 10.0
    noise = db_to_linear(db, cfg.noise_ref)
    share = 1.0 / cfg.subchannels
    entry = SubChannel(share, cfg.bandwidth, cfg.power, cfg.gain, noise)
    return ChannelAllocation((entry,) * cfg.subchannels), cfg.failure_prob[int(status)]
