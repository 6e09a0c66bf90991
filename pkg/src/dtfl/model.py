"""Local model: a one-hidden-layer softmax classifier trained by gradient descent.

Parameters live in one contiguous float64 vector so that aggregation,
distances and cosine checks are plain vector operations; the per-layer
arrays are reshaped views into it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import EmptyShard, NonFiniteLoss

if TYPE_CHECKING:
    from .core import DatasetShard, DeviceNode


class ModelParams:
    """Weights of an ``input_dim x hidden_dim x num_classes`` network."""

    __slots__ = ("flat", "input_dim", "hidden_dim", "num_classes")

    def __init__(self, flat: np.ndarray, input_dim: int, hidden_dim: int, num_classes: int):
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        expected = param_count(input_dim, hidden_dim, num_classes)
        if flat.ndim != 1 or flat.size != expected:
            raise ValueError(f"flat vector has {flat.size} entries, architecture needs {expected}")
        self.flat = flat
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes

    @classmethod
    def from_layers(cls, w1, b1, w2, b2) -> ModelParams:
        w1 = np.asarray(w1, dtype=np.float64)
        w2 = np.asarray(w2, dtype=np.float64)
        flat = np.concatenate([w1.ravel(), np.ravel(b1), w2.ravel(), np.ravel(b2)])
        return cls(flat, w1.shape[0], w1.shape[1], w2.shape[1])

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden_dim, self.num_classes)

    def _slices(self):
        i, h, c = self.shape
        a = i * h
        b = a + h
        d = b + h * c
        return a, b, d

    @property
    def w1(self) -> np.ndarray:
        a, _, _ = self._slices()
        return self.flat[:a].reshape(self.input_dim, self.hidden_dim)

    @property
    def b1(self) -> np.ndarray:
        a, b, _ = self._slices()
        return self.flat[a:b]

    @property
    def w2(self) -> np.ndarray:
        _, b, d = self._slices()
        return self.flat[b:d].reshape(self.hidden_dim, self.num_classes)

    @property
    def b2(self) -> np.ndarray:
        _, _, d = self._slices()
        return self.flat[d:]

    def with_flat(self, flat: np.ndarray) -> ModelParams:
        return ModelParams(flat, *self.shape)

    def copy(self) -> ModelParams:
        return ModelParams(self.flat.copy(), *self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.flat, other.flat)

    def __repr__(self) -> str:
        return f"ModelParams(shape={self.shape}, norm={np.linalg.norm(self.flat):.6g})"


@dataclass(frozen=True)
class TrainReport:
    loss_after: float
    hidden_mean: float
    steps_done: int


def param_count(input_dim: int, hidden_dim: int, num_classes: int) -> int:
    return input_dim * hidden_dim + hidden_dim + hidden_dim * num_classes + num_classes


def init_params(input_dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator) -> ModelParams:
    """He-initialised hidden layer, small output layer, zero biases."""
    w1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden_dim))
    w2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(hidden_dim, num_classes))
    return ModelParams.from_layers(w1, np.zeros(hidden_dim), w2, np.zeros(num_classes))


def zero_params(input_dim: int, hidden_dim: int, num_classes: int) -> ModelParams:
    return ModelParams(np.zeros(param_count(input_dim, hidden_dim, num_classes)), input_dim, hidden_dim, num_classes)


def _xy(batch) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(batch, "x"):
        return batch.x, batch.y
    x, y = batch
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def forward(params: ModelParams, x: np.ndarray):
    """Return (pre-activation, hidden activation, logits)."""
    z = x @ params.w1
    z += params.b1
    h = np.maximum(z, 0.0)
    logits = h @ params.w2
    logits += params.b2
    return z, h, logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(y)), y].mean())


def local_loss(params: ModelParams, shard: DatasetShard) -> float:
    """Mean cross-entropy of ``params`` over every sample of the shard."""
    x, y = _xy(shard)
    if len(y) == 0:
        raise EmptyShard("cannot evaluate loss on an empty shard")
    _, _, logits = forward(params, x)
    return cross_entropy(logits, y)


def hidden_layer_summary(params: ModelParams, shard: DatasetShard) -> float:
    """Mean post-activation hidden value over samples and hidden units."""
    x, _ = _xy(shard)
    if len(x) == 0:
        raise EmptyShard("cannot summarise an empty shard")
    _, h, _ = forward(params, x)
    return float(h.mean())


def evaluate(params: ModelParams, shard: DatasetShard) -> tuple[float, float]:
    """Loss and hidden summary from a single forward pass."""
    x, y = _xy(shard)
    if len(y) == 0:
        raise EmptyShard("cannot evaluate an empty shard")
    _, h, logits = forward(params, x)
    return cross_entropy(logits, y), float(h.mean())


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    _, _, logits = forward(params, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def backprop(params: ModelParams, x: np.ndarray, z: np.ndarray, h: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Push an upstream gradient on the logits back to ``params.flat``."""
    grad = np.empty_like(params.flat)
    i, hd, c = params.shape
    a = i * hd
    b = a + hd
    e = b + hd * c
    grad[b:e] = (h.T @ dlogits).ravel()
    grad[e:] = dlogits.sum(axis=0)
    dh = dlogits @ params.w2.T
    dh *= z > 0
    grad[:a] = (x.T @ dh).ravel()
    grad[a:b] = dh.sum(axis=0)
    return grad


def loss_and_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient with respect to ``params.flat``."""
    n = len(y)
    z, h, logits = forward(params, x)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, backprop(params, x, z, h, d)


def gradient(params: ModelParams, batch) -> np.ndarray:
    x, y = _xy(batch)
    return loss_and_gradient(params, x, y)[1]


def descend(flat: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return flat - lr * grad


def local_train_steps(
    node: DeviceNode,
    params: ModelParams,
    a_i: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int | None = None,
    noise_std: float = 0.05,
) -> tuple[ModelParams, TrainReport]:
    """Run ``a_i`` passes of (mini-batch) gradient descent on the node's shard.

    A ``lazy`` node skips the work and hands back the parameters it was
    given; a ``noisy`` node trains normally and then perturbs the result
    with Gaussian noise of standard deviation ``noise_std``.
    """
    if a_i < 0:
        raise ValueError("a_i must be non-negative")
    shard = node.shard
    x, y = shard.x, shard.y
    n = len(y)
    if n == 0:
        raise EmptyShard(f"node {node.id} has no samples")

    if a_i == 0 or node.malicious == "lazy":
        loss, hmean = evaluate(params, shard)
        return params.copy(), TrainReport(loss, hmean, 0)

    flat = params.flat.copy()
    work = ModelParams(flat, *params.shape)
    full = batch_size is None or batch_size >= n
    for _ in range(a_i):
        if full:
            loss, g = loss_and_gradient(work, x, y)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged on node {node.id}")
            flat -= lr * g
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                loss, g = loss_and_gradient(work, x[idx], y[idx])
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"loss diverged on node {node.id}")
                flat -= lr * g

    if node.malicious == "noisy":
        flat += rng.normal(0.0, noise_std, size=flat.shape)

    loss_after, hmean = evaluate(work, shard)
    if not np.isfinite(loss_after) or not np.all(np.isfinite(flat)):
        raise NonFiniteLoss(f"non-finite parameters on node {node.id}")
    return work, TrainReport(loss_after, hmean, a_i)
