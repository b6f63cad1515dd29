"""One-hidden-layer ReLU classifier with hand-written backprop, local SGD and accuracy.

Flattening order of a parameter vector: W1 (input_dim x hidden_dim, row-major),
b1 (hidden_dim), W2 (hidden_dim x num_classes, row-major), b2 (num_classes).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, Infeasible


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_classes) < 1:
            raise ValueError("model dimensions must be >= 1")

    @property
    def num_params(self) -> int:
        i, h, c = self.input_dim, self.hidden_dim, self.num_classes
        return i * h + h + h * c + c


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    local_iterations: int = 2
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.local_iterations < 1 or self.batch_size < 1:
            raise ValueError("local_iterations and batch_size must be >= 1")


def unflatten(params, spec: ModelSpec):
    p = np.asarray(params, dtype=np.float64)
    if p.ndim != 1 or p.size != spec.num_params:
        raise DimensionMismatch(f"expected {spec.num_params} parameters, got {p.size}")
    i, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    a = i * h
    W1 = p[:a].reshape(i, h)
    b1 = p[a : a + h]
    W2 = p[a + h : a + h + h * c].reshape(h, c)
    b2 = p[a + h + h * c :]
    return W1, b1, W2, b2


def flatten(W1, b1, W2, b2) -> np.ndarray:
    return np.concatenate([np.ravel(W1), np.ravel(b1), np.ravel(W2), np.ravel(b2)]).astype(np.float64)


def init_model(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    k1 = 1.0 / np.sqrt(spec.input_dim)
    k2 = 1.0 / np.sqrt(spec.hidden_dim)
    W1 = rng.uniform(-k1, k1, (spec.input_dim, spec.hidden_dim))
    b1 = rng.uniform(-k1, k1, spec.hidden_dim)
    W2 = rng.uniform(-k2, k2, (spec.hidden_dim, spec.num_classes))
    b2 = rng.uniform(-k2, k2, spec.num_classes)
    return flatten(W1, b1, W2, b2)


def logits(params, spec: ModelSpec, X) -> np.ndarray:
    W1, b1, W2, b2 = unflatten(params, spec)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"inputs have {X.shape[1]} features, model expects {spec.input_dim}")
    return np.maximum(X @ W1 + b1, 0.0) @ W2 + b2


def predict(params, spec: ModelSpec, X) -> np.ndarray:
    # np.argmax keeps the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits(params, spec, X), axis=1)


def loss_and_gradient(params, spec: ModelSpec, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch("batch features and labels differ in length")
    W1, b1, W2, b2 = unflatten(params, spec)
    if X.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"inputs have {X.shape[1]} features, model expects {spec.input_dim}")
    n = X.shape[0]
    pre = X @ W1 + b1
    hid = np.maximum(pre, 0.0)
    z = hid @ W2 + b2
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sz = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sz[:, 0]) - z[rows, y]))

    dz = ez / sz
    dz[rows, y] -= 1.0
    dz /= n
    gW2 = hid.T @ dz
    gb2 = dz.sum(axis=0)
    dpre = (dz @ W2.T) * (pre > 0.0)
    gW1 = X.T @ dpre
    gb1 = dpre.sum(axis=0)
    return loss, flatten(gW1, gb1, gW2, gb2)


def train_local(
    start,
    spec: ModelSpec,
    shard,
    cfg: TrainConfig,
    after_epoch: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Mini-batch SGD for ``cfg.local_iterations`` epochs, reshuffled each epoch.

    ``after_epoch`` may map the current parameters to new ones (used for
    projection by attackers). ``start`` is never modified.
    """
    X = np.asarray(shard.X, dtype=np.float64)
    y = np.asarray(shard.y, dtype=np.int64)
    n = y.shape[0]
    if n == 0:
        raise Infeasible("cannot train on an empty shard")
    params = np.array(start, dtype=np.float64, copy=True)
    if params.size != spec.num_params:
        raise DimensionMismatch(f"expected {spec.num_params} parameters, got {params.size}")
    if cfg.learning_rate == 0.0:
        return params
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.local_iterations):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            _, grad = loss_and_gradient(params, spec, X[batch], y[batch])
            params -= cfg.learning_rate * grad
        if after_epoch is not None:
            params = after_epoch(params)
    return params


def evaluate(params, spec: ModelSpec, testset) -> float:
    """Fraction of argmax-correct predictions on ``testset`` (anything with X and y)."""
    y = np.asarray(testset.y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(params, spec, testset.X) == y))
