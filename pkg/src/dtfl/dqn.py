"""Deep Q-network that picks the number of local updates between aggregations.

Exploration follows the greed-coefficient convention used by this
controller: with probability ``epsilon`` the agent acts greedily and
otherwise samples uniformly, and ``epsilon`` grows toward 1 as training
proceeds. This is the reverse of the usual epsilon-greedy reading.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ArchMismatch, BadMagic, BufferTooSmall, LengthMismatch, TruncatedFile
from .model import ModelParams, backprop, forward, init_params

MAGIC = b"DQN1"


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.9
    epsilon0: float = 0.1
    epsilon_growth: float = 0.002
    epsilon_max: float = 1.0
    target_update_every: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    capacity: int = 2000
    episodes: int = 50
    hidden_dim: int = 200
    max_steps: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon0 <= 1.0 or not 0.0 <= self.epsilon_max <= 1.0:
            raise ValueError("epsilon values must lie in [0, 1]")
        if self.epsilon_growth < 0:
            raise ValueError("epsilon_growth must be non-negative")
        if self.target_update_every < 1 or self.batch_size < 1 or self.capacity < 1:
            raise ValueError("target_update_every, batch_size and capacity must be positive")
        if self.capacity < self.batch_size:
            raise ValueError("capacity must hold at least one batch")
        if self.lr < 0 or self.episodes < 0:
            raise ValueError("lr and episodes must be non-negative")


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        if not (np.all(np.isfinite(self.state)) and np.all(np.isfinite(self.next_state))
                and np.isfinite(self.reward)):
            raise ValueError("experience fields must be finite")


class QNetwork:
    """``state_dim x hidden x num_actions`` rectifier net with linear outputs."""

    def __init__(self, params: ModelParams):
        self.params = params

    @classmethod
    def create(cls, state_dim: int, num_actions: int, rng: np.random.Generator, hidden_dim: int = 200) -> QNetwork:
        return cls(init_params(state_dim, hidden_dim, num_actions, rng))

    @property
    def state_dim(self) -> int:
        return self.params.input_dim

    @property
    def num_actions(self) -> int:
        return self.params.num_classes

    @property
    def arch(self) -> tuple[int, int, int]:
        return self.params.shape

    def q_values(self, states: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return forward(self.params, x)[2]

    def copy(self) -> QNetwork:
        return QNetwork(self.params.copy())


class ReplayBuffer:
    """Fixed-capacity ring buffer that overwrites the oldest experience."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def full(self) -> bool:
        return self._size == self.capacity

    def push(self, exp: Experience) -> None:
        i = self._next
        self.states[i] = exp.state
        self.next_states[i] = exp.next_state
        self.actions[i] = exp.action
        self.rewards[i] = exp.reward
        self.terminals[i] = exp.terminal
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = self._next if self.full else 0
        return (start + np.arange(self._size)) % self.capacity

    def entries(self) -> list[Experience]:
        """Stored experiences, oldest first."""
        return [self._get(int(i)) for i in self._order()]

    def _get(self, i: int) -> Experience:
        return Experience(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                          self.next_states[i].copy(), bool(self.terminals[i]))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self._size < batch_size:
            raise BufferTooSmall(f"buffer holds {self._size} experiences, batch needs {batch_size}")
        return rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Experience]:
        return [self._get(int(i)) for i in self.sample_indices(batch_size, rng)]


def encode_state(losses: Sequence[float], hidden_means: Sequence[float], queue_level: float,
                 prev_action: int, num_actions: int, slot_budget: float = 1.0,
                 extra: Sequence[float] = ()) -> np.ndarray:
    """Flatten ``[losses | hidden means | one-hot previous action | scaled queue | extra]``.

    ``prev_action`` 0 means no action has been taken yet and encodes as all
    zeros. The queue is divided by the per-slot budget.
    """
    losses = np.asarray(losses, dtype=np.float64)
    hidden_means = np.asarray(hidden_means, dtype=np.float64)
    if losses.shape != hidden_means.shape or losses.ndim != 1:
        raise LengthMismatch(f"{losses.size} losses but {hidden_means.size} hidden summaries")
    if not 0 <= prev_action <= num_actions:
        raise ValueError(f"prev_action {prev_action} outside [0, {num_actions}]")
    if slot_budget <= 0:
        raise ValueError("slot_budget must be positive")
    onehot = np.zeros(num_actions)
    if prev_action:
        onehot[prev_action - 1] = 1.0
    return np.concatenate([losses, hidden_means, onehot, [queue_level / slot_budget],
                           np.asarray(extra, dtype=np.float64)])


def state_dim(num_nodes: int, num_actions: int, extra: int = 0) -> int:
    return 2 * num_nodes + num_actions + 1 + extra


def greedy_action(net: QNetwork, state: np.ndarray) -> int:
    # argmax returns the first maximum, so ties go to the smallest action
    return int(np.argmax(net.q_values(state)[0])) + 1


def select_action(net: QNetwork, state: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy with probability ``epsilon``, uniform over ``1..A_max`` otherwise."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return greedy_action(net, state)
    return int(rng.integers(1, net.num_actions + 1))


def q_target(target_net: QNetwork, exp: Experience, gamma: float) -> float:
    if exp.terminal:
        return float(exp.reward)
    return float(exp.reward + gamma * target_net.q_values(exp.next_state)[0].max())


def batch_targets(target_net: QNetwork, rewards: np.ndarray, next_states: np.ndarray,
                  terminals: np.ndarray, gamma: float) -> np.ndarray:
    boot = target_net.q_values(next_states).max(axis=1)
    return rewards + gamma * np.where(terminals, 0.0, boot)


def td_loss(eval_net: QNetwork, batch: Sequence[Experience], targets: Sequence[float]) -> float:
    if len(batch) == 0 or len(batch) != len(targets):
        raise LengthMismatch("batch and targets must be non-empty and of equal length")
    states = np.stack([e.state for e in batch])
    actions = np.array([e.action for e in batch]) - 1
    q = eval_net.q_values(states)[np.arange(len(batch)), actions]
    return float(np.mean((np.asarray(targets, dtype=np.float64) - q) ** 2))


def td_loss_and_gradient(eval_net: QNetwork, states: np.ndarray, actions: np.ndarray,
                         targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared TD error and its gradient; ``actions`` are 1-based."""
    n = len(targets)
    params = eval_net.params
    z, h, q = forward(params, states)
    rows = np.arange(n)
    err = targets - q[rows, actions - 1]
    dq = np.zeros_like(q)
    dq[rows, actions - 1] = -2.0 * err / n
    return float(np.mean(err ** 2)), backprop(params, states, z, h, dq)


def train_step(eval_net: QNetwork, target_net: QNetwork, buffer: ReplayBuffer, cfg: DqnConfig,
               rng: np.random.Generator) -> float:
    """One SGD step on a uniform replay batch; returns the loss before the step."""
    idx = buffer.sample_indices(cfg.batch_size, rng)
    targets = batch_targets(target_net, buffer.rewards[idx], buffer.next_states[idx],
                            buffer.terminals[idx], cfg.gamma)
    loss, grad = td_loss_and_gradient(eval_net, buffer.states[idx], buffer.actions[idx], targets)
    if cfg.lr:
        eval_net.params.flat -= cfg.lr * grad
    return loss


def sync_target(eval_net: QNetwork, target_net: QNetwork) -> None:
    if eval_net.arch != target_net.arch:
        raise ArchMismatch(f"eval {eval_net.arch} vs target {target_net.arch}")
    target_net.params.flat[:] = eval_net.params.flat


class Environment(Protocol):
    state_dim: int
    num_actions: int

    def reset(self) -> np.ndarray: ...

    def step(self, action: int) -> tuple[float, np.ndarray, bool]: ...


@dataclass(frozen=True)
class TdRecord:
    episode: int
    step: int
    epsilon: float
    td_loss: float
    reward: float


@dataclass
class DqnResult:
    eval_net: QNetwork
    target_net: QNetwork
    records: list[TdRecord] = field(default_factory=list)
    episode_rewards: list[float] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)
    env_steps: int = 0

    @property
    def loss_trace(self) -> np.ndarray:
        return np.array([r.td_loss for r in self.records])

    @property
    def learn_steps(self) -> int:
        return len(self.records)


def run_dqn_training(env: Environment, cfg: DqnConfig, rng: np.random.Generator) -> DqnResult:
    """Train an eval/target pair on ``env`` with replay gated on a full buffer.

    Each environment step stores one experience; once the buffer is full
    every further step also takes one SGD step, and the target copy is
    refreshed every ``target_update_every`` of those. ``epsilon`` grows by
    ``epsilon_growth`` per episode up to ``epsilon_max``.
    """
    eval_net = QNetwork.create(env.state_dim, env.num_actions, rng, cfg.hidden_dim)
    target_net = eval_net.copy()
    result = DqnResult(eval_net, target_net)
    buffer = ReplayBuffer(cfg.capacity, env.state_dim)
    epsilon = cfg.epsilon0
    for episode in range(cfg.episodes):
        if cfg.max_steps is not None and result.env_steps >= cfg.max_steps:
            break
        result.epsilons.append(epsilon)
        state = env.reset()
        total = 0.0
        done = False
        while not done:
            action = select_action(eval_net, state, epsilon, rng)
            reward, next_state, done = env.step(action)
            buffer.push(Experience(state, action, reward, next_state, done))
            result.env_steps += 1
            total += reward
            if buffer.full:
                loss = train_step(eval_net, target_net, buffer, cfg, rng)
                result.records.append(TdRecord(episode, result.learn_steps, epsilon, loss, reward))
                if result.learn_steps % cfg.target_update_every == 0:
                    sync_target(eval_net, target_net)
            state = next_state
            if cfg.max_steps is not None and result.env_steps >= cfg.max_steps:
                break
        result.episode_rewards.append(total)
        epsilon = min(cfg.epsilon_max, epsilon + cfg.epsilon_growth)
    return result


def save_qnet(path: str | Path, net: QNetwork) -> None:
    """Write ``DQN1``, three little-endian uint32 dims, then float64 weights."""
    i, h, c = net.arch
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", i, h, c))
        fh.write(net.params.flat.astype("<f8").tobytes())


def load_qnet(path: str | Path) -> QNetwork:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path} does not start with {MAGIC!r}")
    if len(data) < 16:
        raise TruncatedFile(f"{path} ends inside the header")
    i, h, c = struct.unpack("<III", data[4:16])
    n = i * h + h + h * c + c
    if len(data) != 16 + 8 * n:
        raise TruncatedFile(f"{path} holds {len(data) - 16} weight bytes, expected {8 * n}")
    flat = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
    return QNetwork(ModelParams(flat, i, h, c))
