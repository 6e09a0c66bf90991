"""Clustered asynchronous federation driven by per-cluster frequency agents.

Nodes are grouped by data size and speed. Each cluster's curator picks how
many local updates its members run before it aggregates them with
reputation weights. A global model is formed from whatever each cluster
last published, with stale contributions decaying geometrically.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import DeviceNode, Scenario, calibrate_twin, substream
from .dqn import QNetwork, encode_state, greedy_action, state_dim
from .energy import (
    ChannelConfig,
    ChannelStatus,
    EnergyModel,
    channel_params_for,
    comm_energy,
    comm_time,
    compute_energy,
    initial_channel,
    step_channel,
)
from .errors import BadK
from .lyapunov import DeficitQueue, PenaltyWeights, budget_exhausted, drift_penalty_value, queue_update, v_schedule
from .model import ModelParams, accuracy, evaluate, local_train_steps
from .trust import (
    CuratorLedger,
    Upload,
    belief,
    consensus_quality,
    gradient_diversity_flags,
    learning_quality,
    record_interaction,
    trust_weighted_aggregate,
)

STALENESS_BASE = math.e / 2.0
TRACE_COLUMNS = ("round", "simulated_time", "cluster_id", "a_i", "local_loss", "global_accuracy",
                 "Q", "E_cmp", "E_com", "channel_state")


@dataclass(frozen=True)
class ToleranceSchedule:
    alpha0: float = 0.5
    rho: float = 0.02
    alpha_max: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha0 <= 1.0 or not 0.0 < self.alpha_max <= 1.0 or self.rho < 0:
            raise ValueError("need alpha0, alpha_max in (0, 1] and rho >= 0")


@dataclass(frozen=True)
class FederationConfig:
    a_max: int = 10
    lr: float = 0.05
    batch_size: int | None = None
    noise_std: float = 0.05
    global_every: int = 1
    tolerance: ToleranceSchedule = ToleranceSchedule()
    penalty: PenaltyWeights = PenaltyWeights()
    energy: EnergyModel = EnergyModel()
    channel: ChannelConfig = ChannelConfig()
    calibrated: bool = True
    quality: str = "consensus"
    iota: float = 0.5
    diversity_threshold: float = 0.99
    reputation_window: int | None = None
    max_attempts: int = 3
    channel_in_state: bool = True
    standardize_reward: bool = False

    def __post_init__(self):
        if self.a_max < 1 or self.global_every < 1 or self.max_attempts < 1:
            raise ValueError("a_max, global_every and max_attempts must be at least 1")
        if self.quality not in ("consensus", "distance"):
            raise ValueError(f"unknown quality measure {self.quality!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class Mode:
    kind: str = "async_dqn"
    fixed_a: int = 1

    def __post_init__(self):
        if self.kind not in ("async_dqn", "sync_fixed", "async_fixed"):
            raise ValueError(f"unknown mode {self.kind!r}")
        if self.fixed_a < 1:
            raise ValueError("fixed frequency must be at least 1")

    @classmethod
    def parse(cls, text: str) -> Mode:
        text = text.strip()
        if "(" in text:
            kind, arg = text.rstrip(")").split("(", 1)
            return cls(kind.strip(), int(arg))
        return cls(text)

    def __str__(self) -> str:
        return self.kind if self.kind == "async_dqn" else f"{self.kind}({self.fixed_a})"


class RunningStandardizer:
    """Welford running mean/variance used to rescale rewards."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def __call__(self, x: float) -> float:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)
        std = math.sqrt(self.m2 / self.n) if self.n > 1 else 0.0
        return (x - self.mean) / std if std > 1e-12 else 0.0


# --- clustering -----------------------------------------------------------

def _normalize(col: np.ndarray) -> np.ndarray:
    lo, hi = col.min(), col.max()
    return (col - lo) / (hi - lo) if hi > lo else np.zeros_like(col)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100,
           tol: float = 1e-6) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds; returns a label per point.

    An emptied cluster takes the point farthest from the centroid of the
    currently largest cluster.
    """
    n = len(points)
    if not 1 <= k <= n:
        raise BadK(f"K={k} must lie in [1, {n}]")
    centers = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(points[idx])
    centers = np.array(centers, dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            if not np.any(labels == j):
                big = int(np.argmax(np.bincount(labels, minlength=k)))
                members = np.flatnonzero(labels == big)
                far = members[np.argmax(((points[members] - centers[big]) ** 2).sum(-1))]
                labels[far] = j
        new = np.array([points[labels == j].mean(axis=0) for j in range(k)])
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    return labels


def within_cluster_variance(points: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for j in np.unique(labels):
        p = points[labels == j]
        total += float(((p - p.mean(axis=0)) ** 2).sum())
    return total


def cluster_features(nodes: Sequence[DeviceNode]) -> np.ndarray:
    sizes = np.array([n.shard.size for n in nodes], dtype=np.float64)
    freqs = np.array([n.true_cpu_freq for n in nodes], dtype=np.float64)
    return np.column_stack([_normalize(sizes), _normalize(freqs)])


def cluster_nodes(nodes: Sequence[DeviceNode], k: int, rng: np.random.Generator) -> list[list[int]]:
    """Group node ids by (normalized data size, normalized CPU frequency).

    Clusters are returned ordered by their smallest member id so that the
    numbering does not depend on seeding order.
    """
    labels = kmeans(cluster_features(nodes), k, rng)
    groups = [sorted(nodes[i].id for i in np.flatnonzero(labels == j)) for j in range(k)]
    return sorted(groups, key=lambda g: g[0])


# --- frequency clamp and global merge ---------------------------------------

def clamp_frequency(a: int, per_training_time: float, alpha_tol: float, t_min: float) -> int:
    """Cap ``a`` so that ``a * per_training_time`` stays within ``alpha_tol * t_min``; never below 1."""
    if per_training_time <= 0 or t_min <= 0:
        raise ValueError("times must be positive")
    if not 0.0 < alpha_tol <= 1.0:
        raise ValueError("alpha_tol must lie in (0, 1]")
    limit = alpha_tol * t_min
    if a * per_training_time > limit:
        a = math.floor(limit / per_training_time)
    return max(int(a), 1)


def tolerance_schedule(sched: ToleranceSchedule, global_round: int) -> float:
    if global_round < 0:
        raise ValueError("global_round must be non-negative")
    return min(sched.alpha_max, sched.alpha0 + sched.rho * global_round)


def staleness_weights(timestamps: Sequence[int], t: int) -> np.ndarray:
    lags = t - np.asarray(timestamps, dtype=np.float64)
    if np.any(lags < 0):
        raise ValueError("a timestamp lies in the future")
    w = STALENESS_BASE ** (-lags)
    return w / w.sum()


def time_weighted_global_aggregate(params: Sequence[ModelParams], timestamps: Sequence[int], t: int) -> ModelParams:
    """Staleness-discounted mean of cluster models, weights normalized to one."""
    if not params:
        raise ValueError("need at least one cluster")
    w = staleness_weights(timestamps, t)
    merged = w @ np.stack([p.flat for p in params])
    return params[0].with_flat(merged)


# --- one cluster's curator ------------------------------------------------

@dataclass
class StepInfo:
    round: int
    a: int
    channel: ChannelStatus
    loss: float
    e_cmp: float
    e_com: float
    est_cmp: float
    est_com: float
    q: float
    consumed: float
    reward: float
    duration: float
    received: int
    attempts: int


class ClusterEnv:
    """A curator and its members as a reinforcement-learning environment.

    One step is one local round: members train ``a`` times from the
    cluster model, upload over the shared channel, and the curator scores
    them and aggregates. The channel moves one state per local training.
    The reward is the drift-plus-penalty value of the round computed from
    the curator's twin-based energy estimate.
    """

    def __init__(self, scenario: Scenario, member_ids: Sequence[int], cfg: FederationConfig,
                 budget_total: float, horizon: int, stream: str = "cluster0",
                 start_params: ModelParams | None = None):
        if not member_ids:
            raise ValueError("a cluster needs at least one member")
        self.scenario = scenario
        self.cfg = cfg
        self.ids = list(member_ids)
        self.nodes = [replace(scenario.node(i), energy_spent=0.0) for i in self.ids]
        self.twins = [scenario.twin(i) for i in self.ids]
        self.sizes = np.array([n.shard.size for n in self.nodes], dtype=np.float64)
        self.budget_total = budget_total
        self.budget_fraction = scenario.config.budget_fraction
        self.horizon = horizon
        self.start_params = start_params if start_params is not None else scenario.initial_params
        self.num_actions = cfg.a_max
        self.state_dim = state_dim(len(self.ids), cfg.a_max, 3 if cfg.channel_in_state else 0)
        seed = scenario.config.seed
        self.rng_channel = substream(seed, f"{stream}/channel")
        self.rng_train = substream(seed, f"{stream}/train")
        self.rng_upload = substream(seed, f"{stream}/upload")
        if cfg.calibrated:
            self.est_freq = np.array([calibrate_twin(t) for t in self.twins])
        else:
            self.est_freq = np.array([t.mapped_cpu_freq for t in self.twins])
        self.true_freq = np.array([n.true_cpu_freq for n in self.nodes])
        cycles = cfg.energy.cycles_per_training
        self.est_train_time = float((cycles / self.est_freq).max())
        self.true_train_time = float((cycles / self.true_freq).max())
        self.ledger_rows: list[tuple] = []
        self.reset()

    @property
    def slot_budget(self) -> float:
        return self.queue.slot_budget

    def reset(self, params: ModelParams | None = None) -> np.ndarray:
        self.params = (params if params is not None else self.start_params).copy()
        for n in self.nodes:
            n.energy_spent = 0.0
        self.queue = DeficitQueue(self.budget_total, self.budget_fraction, self.horizon)
        self.ledger = CuratorLedger(0, self.ids, self.cfg.iota, self.cfg.reputation_window)
        self.round = 0
        self.prev_action = 0
        self.done = False
        self.true_consumed = 0.0
        self.channel = initial_channel(self.cfg.channel, self.rng_channel)
        self.normalizer = RunningStandardizer() if self.cfg.standardize_reward else None
        self.history: list[StepInfo] = []
        self._measure()
        return self.state()

    def _measure(self) -> None:
        out = [evaluate(self.params, n.shard) for n in self.nodes]
        self.node_losses = np.array([o[0] for o in out])
        self.hidden_means = np.array([o[1] for o in out])
        self.loss = float(self.sizes @ self.node_losses / self.sizes.sum())

    def set_params(self, params: ModelParams) -> None:
        """Adopt a broadcast model and refresh the observed training state."""
        self.params = params.copy()
        self._measure()

    def state(self) -> np.ndarray:
        extra = ()
        if self.cfg.channel_in_state:
            extra = np.eye(3)[int(self.channel.state)]
        return encode_state(self.node_losses, self.hidden_means, self.queue.q, self.prev_action,
                            self.num_actions, self.queue.slot_budget, extra)

    def _quality(self, uploads: list[Upload]) -> dict[int, float]:
        if self.cfg.quality == "consensus":
            return consensus_quality(uploads)
        return learning_quality(uploads)

    def step(self, a: int) -> tuple[float, np.ndarray, bool]:
        if self.done:
            raise RuntimeError("episode has ended; call reset()")
        if not 1 <= a <= self.num_actions:
            raise ValueError(f"action {a} outside [1, {self.num_actions}]")
        cfg = self.cfg
        for _ in range(a - 1):
            self.channel = step_channel(self.channel, self.rng_channel)
        status = self.channel.state

        uploads: list[Upload] = []
        e_cmp = e_com = est_cmp = est_com = 0.0
        attempts_total = 0
        max_comm_time = 0.0
        for k, node in enumerate(self.nodes):
            new_params, _ = local_train_steps(node, self.params, a, cfg.lr, self.rng_train,
                                              cfg.batch_size, cfg.noise_std)
            alloc, u = channel_params_for(self.channel, cfg.channel, self.rng_channel)
            per_attempt = comm_energy(alloc, cfg.energy)
            attempts = 0
            delivered = False
            while attempts < cfg.max_attempts and not delivered:
                attempts += 1
                delivered = self.rng_upload.random() >= u
            cmp_true = compute_energy(a, cfg.energy, self.true_freq[k])
            node.spend(cmp_true + attempts * per_attempt)
            e_cmp += cmp_true
            e_com += attempts * per_attempt
            est_cmp += compute_energy(1, cfg.energy, self.est_freq[k])
            est_com += attempts * per_attempt
            attempts_total += attempts
            max_comm_time = max(max_comm_time, attempts * comm_time(alloc, cfg.energy))
            if delivered:
                uploads.append(Upload(node.id, new_params, self.round, u))

        if uploads:
            quality = self._quality(uploads)
            flags = gradient_diversity_flags(uploads, self.params, cfg.diversity_threshold) if len(uploads) > 1 else set()
            for up in uploads:
                rec = self.ledger.records[up.node_id]
                dev = self.twins[self.ids.index(up.node_id)].deviation if cfg.calibrated else 1.0
                b = belief(up.failure_prob, quality[up.node_id], dev, rec.alpha, rec.beta)
                self.ledger.records[up.node_id] = record_interaction(
                    rec, up.node_id in flags, b, up.failure_prob, quality[up.node_id])
            self.params = trust_weighted_aggregate(uploads, self.ledger.reputations())

        loss_prev = self.loss
        self._measure()
        q_pre = self.queue.q
        v = v_schedule(cfg.penalty, self.round)
        reward = drift_penalty_value(v, loss_prev, self.loss, q_pre, a, est_cmp, est_com)
        self.queue = queue_update(self.queue, a, est_cmp, est_com)
        self.true_consumed += e_cmp + e_com
        self.round += 1
        self.prev_action = a
        self.done = budget_exhausted(self.queue) or self.round >= self.horizon
        duration = a * self.true_train_time + max_comm_time
        self.history.append(StepInfo(self.round - 1, a, status, self.loss, e_cmp, e_com, a * est_cmp, est_com,
                                     self.queue.q, self.queue.consumed, reward, duration, len(uploads),
                                     attempts_total))
        self.channel = step_channel(self.channel, self.rng_channel)
        if self.normalizer is not None:
            reward = self.normalizer(reward)
        return reward, self.state(), self.done

    def reputations(self) -> dict[int, float]:
        return self.ledger.reputations()


# --- full federation --------------------------------------------------------

@dataclass
class MetricsTrace:
    rows: list[tuple] = field(default_factory=list)
    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    clusters: list[list[int]] = field(default_factory=list)
    final_params: ModelParams | None = None
    envs: list[ClusterEnv] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1][2] if self.epochs else float("nan")

    @property
    def total_consumed(self) -> float:
        return float(sum(env.true_consumed for env in self.envs))

    def time_to_accuracy(self, target: float) -> float:
        for _, t, acc in self.epochs:
            if acc >= target:
                return t
        return float("inf")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.rows:
            w.writerow([_num(v) for v in row])
        return buf.getvalue()


def _agent_action(agent: QNetwork | None, env: ClusterEnv, mode: Mode) -> int:
    if mode.kind == "async_dqn":
        return greedy_action(agent, env.state())
    return mode.fixed_a


def _num(v):
    """CSV cell text: shortest round-trip repr for floats of any numeric type."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def make_cluster_envs(scenario: Scenario, clusters: Sequence[Sequence[int]], cfg: FederationConfig,
                      horizon: int, prefix: str = "") -> list[ClusterEnv]:
    """One environment per cluster; the resource budget is split in proportion to member count."""
    total = sum(len(ids) for ids in clusters)
    return [ClusterEnv(scenario, ids, cfg, scenario.config.budget_total * len(ids) / total, horizon,
                       stream=f"{prefix}cluster{j}")
            for j, ids in enumerate(clusters)]


def run_federation(scenario: Scenario, mode: Mode, rounds: int, cfg: FederationConfig = FederationConfig(),
                   agents: Sequence[QNetwork] | None = None,
                   clusters: Sequence[Sequence[int]] | None = None, stream_prefix: str = "run/") -> MetricsTrace:
    """Run ``rounds`` global epochs and return the per-cluster event trace.

    An epoch lasts as long as the fastest active cluster needs for its own
    local round. In async modes every other idle cluster has its update
    count clamped to fit within the tolerance, and anything still running
    at the epoch boundary stays busy and publishes later, so its model
    reaches the global merge with a lag. ``sync_fixed`` instead waits for
    the slowest cluster every epoch and applies no clamp.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if clusters is None:
        clusters = cluster_nodes(scenario.nodes, scenario.config.num_clusters,
                                 substream(scenario.config.seed, "clustering"))
    clusters = [list(c) for c in clusters]
    fixed_cfg = cfg if mode.kind == "async_dqn" else replace(cfg, a_max=max(cfg.a_max, mode.fixed_a))
    envs = make_cluster_envs(scenario, clusters, fixed_cfg, rounds, stream_prefix)
    if mode.kind == "async_dqn" and (agents is None or len(agents) != len(envs)):
        raise ValueError("async_dqn needs one agent per cluster")
    trace = MetricsTrace(clusters=clusters, envs=envs)

    n = len(envs)
    published = [scenario.initial_params.copy() for _ in range(n)]
    stamps = [0] * n
    busy_until = [0.0] * n
    pending: list[StepInfo | None] = [None] * n
    global_params = scenario.initial_params.copy()
    clock = 0.0
    test = scenario.test

    for epoch in range(rounds):
        active = [j for j in range(n) if not envs[j].done or pending[j] is not None]
        if not active:
            break
        idle = [j for j in active if pending[j] is None and not envs[j].done]
        decisions: dict[int, int] = {}
        for j in idle:
            decisions[j] = _agent_action(agents[j] if agents is not None else None, envs[j], mode)

        if mode.kind == "sync_fixed":
            for j in idle:
                pending[j] = _start(envs[j], decisions[j])
                busy_until[j] = clock + pending[j].duration
            end = max(busy_until[j] for j in active)
        else:
            if idle:
                bench = min(idle, key=lambda j: (envs[j].est_train_time, j))
                t_m = decisions[bench] * envs[bench].est_train_time
                alpha = tolerance_schedule(cfg.tolerance, epoch)
                for j in idle:
                    a = decisions[j]
                    if j != bench:
                        a = clamp_frequency(a, envs[j].est_train_time, alpha, t_m)
                    pending[j] = _start(envs[j], a)
                    busy_until[j] = clock + pending[j].duration
                end = busy_until[bench]
            else:
                end = min(busy_until[j] for j in active)

        finished = [j for j in active if pending[j] is not None and busy_until[j] <= end + 1e-12]
        for j in finished:
            published[j] = envs[j].params.copy()
            stamps[j] = epoch
        clock = end
        merge = (epoch + 1) % cfg.global_every == 0
        if merge:
            global_params = time_weighted_global_aggregate(published, stamps, epoch)
        acc = accuracy(global_params, test.x, test.y)
        for j in finished:
            info = pending[j]
            trace.rows.append((epoch, busy_until[j], j, info.a, info.loss, acc, info.q, info.e_cmp,
                               info.e_com, int(info.channel)))
            pending[j] = None
            if merge and not envs[j].done:
                envs[j].set_params(global_params)
        trace.epochs.append((epoch, clock, acc))
    trace.final_params = global_params
    return trace


def _start(env: ClusterEnv, a: int) -> StepInfo:
    env.step(a)
    return env.history[-1]


def write_trace_ledgers(trace: MetricsTrace) -> dict[str, str]:
    """Companion CSVs for queue, channel and reputation state, keyed by file stem."""
    out = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("cluster_id", "round", "Q", "consumed", "budget_rate", "penalty_value"))
    for j, env in enumerate(trace.envs):
        for s in env.history:
            w.writerow((j, s.round, _num(s.q), _num(s.consumed), _num(env.slot_budget), _num(s.reward)))
    out["queue"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("cluster_id", "round", "channel_state", "E_cmp_total", "E_com_total"))
    for j, env in enumerate(trace.envs):
        for s in env.history:
            w.writerow((j, s.round, int(s.channel), _num(s.e_cmp), _num(s.e_com)))
    out["channel"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("cluster_id", "node_id", "alpha", "beta", "reputation"))
    for j, env in enumerate(trace.envs):
        for nid, rec in sorted(env.ledger.records.items()):
            w.writerow((j, nid, _num(rec.alpha), _num(rec.beta), _num(env.ledger.reputation(nid))))
    out["reputation"] = buf.getvalue()
    return out
