"""Scenario model: devices, their digital twins, data shards and seeded streams.

Every random draw in a run comes from :func:`substream`, keyed by the
scenario seed and a stream name, so switching one subsystem on or off
never shifts the draws seen by another.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import BadConfig, BadRange, EmptyDataset
from .model import ModelParams, evaluate, init_params

ATTACKER_TAGS = ("honest", "lazy", "noisy")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named stream of a seeded run."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


@dataclass(frozen=True)
class DatasetShard:
    x: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return int(len(self.y))

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.x[i], int(self.y[i])) for i in range(self.size)]

    def __len__(self) -> int:
        return self.size


@dataclass
class DeviceNode:
    id: int
    true_cpu_freq: float
    shard: DatasetShard
    params: ModelParams
    energy_spent: float = 0.0
    malicious: str = "honest"

    def spend(self, energy: float) -> None:
        if energy < 0:
            raise ValueError("energy cannot be negative")
        self.energy_spent += energy


@dataclass
class DigitalTwin:
    node_id: int
    mapped_loss: float
    mapped_cpu_freq: float
    mapped_energy: float
    deviation: float


@dataclass(frozen=True)
class ScenarioConfig:
    num_nodes: int = 20
    num_clusters: int = 4
    seed: int = 0
    budget_total: float = 750.0
    budget_fraction: float = 0.8
    num_classes: int = 10
    rounds_max: int = 50
    dataset_source: str = "synthetic"
    idx_images: str = ""
    idx_labels: str = ""
    num_features: int = 10
    samples_per_node: int = 200
    test_samples: int = 1000
    class_sep: float = 1.5
    label_skew: float = 0.5
    hidden_dim: int = 200
    cpu_freq_lo: float = 1.0
    cpu_freq_hi: float = 4.0
    deviation_lo: float = 0.0
    deviation_hi: float = 0.2
    num_noisy: int = 0
    num_lazy: int = 0

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise BadConfig("num_nodes must be at least 1")
        if not 1 <= self.num_clusters <= self.num_nodes:
            raise BadConfig(f"num_clusters={self.num_clusters} must lie in [1, num_nodes={self.num_nodes}]")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise BadConfig("budget_fraction must lie in (0, 1]")
        if self.budget_total <= 0:
            raise BadConfig("budget_total must be positive")
        if self.num_classes < 2:
            raise BadConfig("num_classes must be at least 2")
        if self.rounds_max < 1:
            raise BadConfig("rounds_max must be at least 1")
        if self.dataset_source not in ("synthetic", "idx"):
            raise BadConfig(f"unknown dataset_source {self.dataset_source!r}")
        if not 0.0 <= self.label_skew <= 1.0:
            raise BadConfig("label_skew must lie in [0, 1]")
        if not 0.0 < self.cpu_freq_lo <= self.cpu_freq_hi:
            raise BadConfig("need 0 < cpu_freq_lo <= cpu_freq_hi")
        if not 0.0 <= self.deviation_lo <= self.deviation_hi:
            raise BadConfig("need 0 <= deviation_lo <= deviation_hi")
        if self.deviation_hi >= self.cpu_freq_lo:
            raise BadConfig("deviation_hi must stay below cpu_freq_lo so mapped frequencies remain positive")
        if self.num_noisy < 0 or self.num_lazy < 0 or self.num_noisy + self.num_lazy > self.num_nodes:
            raise BadConfig("attacker counts must be non-negative and fit in num_nodes")
        if self.hidden_dim < 1 or self.num_features < 1:
            raise BadConfig("hidden_dim and num_features must be positive")


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    nodes: tuple[DeviceNode, ...]
    twins: tuple[DigitalTwin, ...]
    test: DatasetShard
    initial_params: ModelParams
    train: DatasetShard = field(repr=False)

    def node(self, node_id: int) -> DeviceNode:
        return self.nodes[node_id]

    def twin(self, node_id: int) -> DigitalTwin:
        return self.twins[node_id]


def sample_dt_deviation(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Draw a twin's CPU-frequency deviation from Uniform[lo, hi]."""
    if lo < 0 or lo > hi:
        raise BadRange(f"invalid deviation range [{lo}, {hi}]")
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def calibrate_twin(twin: DigitalTwin) -> float:
    return twin.mapped_cpu_freq + twin.deviation


def make_blobs(rng: np.random.Generator, n: int, num_classes: int, num_features: int,
               class_sep: float, centers: np.ndarray | None = None):
    """Balanced Gaussian blobs with unit within-class spread."""
    if centers is None:
        centers = rng.normal(0.0, class_sep, size=(num_classes, num_features))
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = centers[y] + rng.normal(0.0, 1.0, size=(n, num_features))
    return x, y.astype(np.int64), centers


def partition_label_skew(y: np.ndarray, num_nodes: int, skew: float, num_classes: int,
                         rng: np.random.Generator) -> list[np.ndarray]:
    """Split sample indices into disjoint, equally sized node shards.

    Node ``i`` first takes ``round(skew * size)`` samples of its dominant
    class ``i % num_classes`` (as many as remain), then is topped up from a
    shuffled pool of everything left over.
    """
    total = len(y)
    if total < num_nodes:
        raise EmptyDataset(f"{total} samples cannot cover {num_nodes} nodes")
    sizes = [total // num_nodes + (1 if i < total % num_nodes else 0) for i in range(num_nodes)]
    pools = {c: list(rng.permutation(np.flatnonzero(y == c))) for c in range(num_classes)}
    shards: list[list[int]] = []
    for i in range(num_nodes):
        pool = pools[i % num_classes]
        take = min(int(round(skew * sizes[i])), len(pool))
        shards.append([int(v) for v in pool[:take]])
        del pool[:take]
    rest = np.concatenate([np.asarray(p, dtype=np.int64) for p in pools.values()]) if pools else np.array([], int)
    rest = rng.permutation(np.sort(rest))
    pos = 0
    for i in range(num_nodes):
        need = sizes[i] - len(shards[i])
        shards[i].extend(int(v) for v in rest[pos:pos + need])
        pos += need
    return [np.asarray(sorted(s), dtype=np.int64) for s in shards]


def _load_dataset(config: ScenarioConfig):
    total = config.num_nodes * config.samples_per_node
    if config.dataset_source == "idx":
        from .idx import load_idx_dataset

        data = load_idx_dataset(Path(config.idx_images), Path(config.idx_labels))
        if data.size < total + 1:
            raise EmptyDataset(f"IDX data has {data.size} samples, need more than {total}")
        n_test = min(config.test_samples, data.size - total)
        train = DatasetShard(data.x[:total], data.y[:total])
        test = DatasetShard(data.x[total:total + n_test], data.y[total:total + n_test])
        return train, test
    rng = substream(config.seed, "data")
    x, y, centers = make_blobs(rng, total, config.num_classes, config.num_features, config.class_sep)
    xt, yt, _ = make_blobs(rng, config.test_samples, config.num_classes, config.num_features,
                           config.class_sep, centers=centers)
    return DatasetShard(x, y), DatasetShard(xt, yt)


def init_scenario(config: ScenarioConfig) -> Scenario:
    """Build nodes, shards, twins and the broadcast initial model for ``config``."""
    config.validate()
    train, test = _load_dataset(config)
    if train.size == 0:
        raise EmptyDataset("dataset is empty")
    if np.any(train.y < 0) or np.any(train.y >= config.num_classes):
        raise BadConfig("labels fall outside [0, num_classes)")

    parts = partition_label_skew(train.y, config.num_nodes, config.label_skew, config.num_classes,
                                 substream(config.seed, "partition"))
    if any(len(p) == 0 for p in parts):
        raise EmptyDataset("a node shard would receive zero samples")

    input_dim = train.x.shape[1]
    w0 = init_params(input_dim, config.hidden_dim, config.num_classes, substream(config.seed, "init"))

    freqs = substream(config.seed, "cpu").uniform(config.cpu_freq_lo, config.cpu_freq_hi, size=config.num_nodes)
    tags = ["honest"] * config.num_nodes
    picks = substream(config.seed, "attackers").permutation(config.num_nodes)
    for k, nid in enumerate(picks[: config.num_noisy + config.num_lazy]):
        tags[int(nid)] = "noisy" if k < config.num_noisy else "lazy"

    dev_rng = substream(config.seed, "deviation")
    nodes, twins = [], []
    for i, idx in enumerate(parts):
        shard = DatasetShard(train.x[idx], train.y[idx])
        nodes.append(DeviceNode(i, float(freqs[i]), shard, w0.copy(), 0.0, tags[i]))
        dev = sample_dt_deviation(dev_rng, config.deviation_lo, config.deviation_hi)
        loss, _ = evaluate(w0, shard)
        # twin under-reports the frequency by the deviation; calibration adds it back
        twins.append(DigitalTwin(i, loss, float(freqs[i]) - dev, 0.0, dev))
    return Scenario(config, tuple(nodes), tuple(twins), test, w0, train)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def scenario_to_text(scenario: Scenario) -> str:
    """Line-per-field dump with a fixed field order, used for golden comparisons."""
    lines = []
    for f in fields(ScenarioConfig):
        lines.append(f"config.{f.name} = {_fmt(getattr(scenario.config, f.name))}")
    lines.append(f"initial_params.digest = {_digest(scenario.initial_params.flat)}")
    lines.append(f"test.size = {scenario.test.size}")
    lines.append(f"test.digest = {_digest(scenario.test.x, scenario.test.y)}")
    for node, twin in zip(scenario.nodes, scenario.twins):
        p = f"node.{node.id}"
        lines.append(f"{p}.true_cpu_freq = {_fmt(node.true_cpu_freq)}")
        lines.append(f"{p}.malicious = {node.malicious}")
        lines.append(f"{p}.energy_spent = {_fmt(node.energy_spent)}")
        lines.append(f"{p}.shard.size = {node.shard.size}")
        counts = np.bincount(node.shard.y, minlength=scenario.config.num_classes)
        lines.append(f"{p}.shard.label_counts = {','.join(str(int(c)) for c in counts)}")
        lines.append(f"{p}.shard.digest = {_digest(node.shard.x, node.shard.y)}")
        lines.append(f"{p}.twin.mapped_loss = {_fmt(twin.mapped_loss)}")
        lines.append(f"{p}.twin.mapped_cpu_freq = {_fmt(twin.mapped_cpu_freq)}")
        lines.append(f"{p}.twin.mapped_energy = {_fmt(twin.mapped_energy)}")
        lines.append(f"{p}.twin.deviation = {_fmt(twin.deviation)}")
    return "\n".join(lines) + "\n"
