"""Synthetic datasets, Dirichlet non-IID partitioning and backdoor data injection.

A dataset is held as a feature matrix ``X`` (n x d) plus integer labels ``y``;
``Dataset[i]`` yields a single :class:`Sample` when per-row access is wanted.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, Infeasible

PIXEL_TRIGGER = "pixel_trigger"
EDGE_CASE = "edge_case"
PARTITION_RETRIES = 100


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise DimensionMismatch("features and labels differ in length")

    def __len__(self):
        return int(self.y.shape[0])

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    @property
    def feature_dim(self) -> int:
        return int(self.X.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)


@dataclass
class Shard:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    poisoned_count: int = 0

    def __len__(self):
        return int(self.y.shape[0])

    def as_dataset(self, num_classes: int) -> Dataset:
        return Dataset(self.X, self.y, num_classes)


@dataclass(frozen=True)
class BackdoorSpec:
    kind: str = PIXEL_TRIGGER
    target_label: int = 0
    trigger_coords: tuple = ()  # ((index, value), ...)
    edge_center: tuple | None = None
    edge_radius: float = 1.0
    poison_fraction: float = 0.5
    # true class of edge-case inputs, used when benign clients hold correctly-labelled copies
    source_label: int | None = None

    def __post_init__(self):
        if self.kind not in (PIXEL_TRIGGER, EDGE_CASE):
            raise ValueError(f"unknown backdoor kind {self.kind!r}")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ValueError("poison_fraction must lie in [0, 1]")
        if self.kind == EDGE_CASE:
            if self.edge_center is None:
                raise ValueError("edge_case backdoor needs edge_center")
            if self.edge_radius <= 0:
                raise ValueError("edge_radius must be positive")
        object.__setattr__(self, "trigger_coords", tuple((int(i), float(v)) for i, v in self.trigger_coords))
        if self.edge_center is not None:
            object.__setattr__(self, "edge_center", tuple(float(v) for v in self.edge_center))

    def validate_for(self, feature_dim: int, num_classes: int | None = None) -> None:
        if num_classes is not None and not 0 <= self.target_label < num_classes:
            raise ValueError(f"target_label {self.target_label} outside [0, {num_classes})")
        if self.kind == PIXEL_TRIGGER:
            for idx, _ in self.trigger_coords:
                if not 0 <= idx < feature_dim:
                    raise DimensionMismatch(f"trigger index {idx} outside feature length {feature_dim}")
        elif len(self.edge_center) != feature_dim:
            raise DimensionMismatch("edge_center length differs from feature length")


def class_means(num_classes: int, feature_dim: int, class_separation: float) -> np.ndarray:
    """Class c sits at (sep / sqrt 2) * e_c, so every pair of means is ``sep`` apart."""
    if num_classes > feature_dim:
        raise DimensionMismatch("need feature_dim >= num_classes for the blob layout")
    means = np.zeros((num_classes, feature_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = class_separation / math.sqrt(2.0)
    return means


def make_synthetic_dataset(num_classes, samples_per_class, feature_dim, class_separation, seed) -> Dataset:
    """Unit-variance Gaussian blob per class, shuffled with ``seed``."""
    if num_classes < 2 or feature_dim < 2:
        raise DimensionMismatch("need num_classes >= 2 and feature_dim >= 2")
    if samples_per_class < 0 or class_separation <= 0:
        raise ValueError("samples_per_class must be >= 0 and class_separation > 0")
    means = class_means(num_classes, feature_dim, class_separation)
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), samples_per_class)
    X = means[y] + rng.standard_normal((y.size, feature_dim))
    order = rng.permutation(y.size)
    return Dataset(X[order], y[order], num_classes)


def dirichlet_partition(data: Dataset, num_clients: int, alpha: float, seed: int) -> list[Shard]:
    """Split each class across clients with proportions drawn from Dirichlet(alpha).

    Redraws (up to 100 times) whenever some client would end up empty.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = len(data)
    if n < num_clients:
        raise Infeasible(f"{n} samples cannot fill {num_clients} non-empty shards")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(data.y == c) for c in range(data.num_classes)]
    for _ in range(PARTITION_RETRIES):
        owner = np.empty(n, dtype=np.int64)
        for idx in by_class:
            if idx.size == 0:
                continue
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            perm = rng.permutation(idx)
            for client, part in enumerate(np.split(perm, cuts)):
                owner[part] = client
        counts = np.bincount(owner, minlength=num_clients)
        if counts.min() > 0:
            return [
                Shard(c, data.X[owner == c], data.y[owner == c]) for c in range(num_clients)
            ]
    raise Infeasible(f"could not draw a partition without empty shards in {PARTITION_RETRIES} tries")


def sample_ball(center, radius: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points uniform in the L2 ball around ``center``."""
    center = np.asarray(center, dtype=np.float64)
    d = center.size
    direction = rng.standard_normal((count, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / d)
    return center + direction * r[:, None]


def apply_trigger(X: np.ndarray, trigger_coords) -> np.ndarray:
    out = np.array(X, dtype=np.float64, copy=True)
    for idx, value in trigger_coords:
        out[:, idx] = value
    return out


def inject_backdoor(shard: Shard, spec: BackdoorSpec, seed: int) -> Shard:
    """Return a poisoned copy of ``shard``; the input is left untouched.

    pixel_trigger overwrites the trigger coordinates of round(fraction * n)
    samples and relabels them; edge_case appends round(fraction * n) points from
    the edge ball labelled with the target.
    """
    spec.validate_for(shard.X.shape[1])
    rng = np.random.default_rng(seed)
    n = len(shard)
    count = int(round(spec.poison_fraction * n))
    if count == 0:
        return replace(shard, X=shard.X.copy(), y=shard.y.copy())
    if spec.kind == PIXEL_TRIGGER:
        chosen = np.sort(rng.choice(n, size=count, replace=False))
        X = shard.X.copy()
        y = shard.y.copy()
        X[chosen] = apply_trigger(X[chosen], spec.trigger_coords)
        y[chosen] = spec.target_label
        return Shard(shard.client_id, X, y, shard.poisoned_count + count)
    pts = sample_ball(spec.edge_center, spec.edge_radius, count, rng)
    X = np.vstack([shard.X, pts])
    y = np.concatenate([shard.y, np.full(count, spec.target_label, dtype=np.int64)])
    return Shard(shard.client_id, X, y, shard.poisoned_count + count)


def inject_clean_backdoor(shard: Shard, spec: BackdoorSpec, fraction: float, seed: int) -> Shard:
    """Give a benign client correctly-labelled backdoor inputs (trigger or edge points)."""
    rng = np.random.default_rng(seed)
    n = len(shard)
    count = int(round(fraction * n))
    if count == 0:
        return shard
    if spec.kind == PIXEL_TRIGGER:
        chosen = np.sort(rng.choice(n, size=count, replace=False))
        X = shard.X.copy()
        X[chosen] = apply_trigger(X[chosen], spec.trigger_coords)
        return Shard(shard.client_id, X, shard.y.copy(), shard.poisoned_count)
    if spec.source_label is None:
        raise ValueError("edge_case spec needs source_label for correctly-labelled copies")
    pts = sample_ball(spec.edge_center, spec.edge_radius, count, rng)
    return Shard(
        shard.client_id,
        np.vstack([shard.X, pts]),
        np.concatenate([shard.y, np.full(count, spec.source_label, dtype=np.int64)]),
        shard.poisoned_count,
    )


def make_backdoor_testset(spec: BackdoorSpec, base: Dataset, size: int, seed: int) -> Dataset:
    """Inputs carrying the backdoor pattern, all labelled with the target class.

    For pixel triggers the inputs are drawn from ``base`` samples whose true
    label is not the target, so a clean model scores near zero.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    if spec.kind == PIXEL_TRIGGER:
        spec.validate_for(base.feature_dim)
        pool = np.flatnonzero(base.y != spec.target_label)
        if pool.size == 0:
            pool = np.arange(len(base))
        idx = rng.choice(pool, size=size, replace=size > pool.size)
        X = apply_trigger(base.X[idx], spec.trigger_coords)
    else:
        X = sample_ball(spec.edge_center, spec.edge_radius, size, rng)
    return Dataset(X, np.full(size, spec.target_label, dtype=np.int64), base.num_classes)


def write_dataset_csv(path, data: Dataset) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(data.feature_dim)] + ["label"])
        for row, label in zip(data.X, data.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def read_dataset_csv(path, num_classes: int | None = None) -> Dataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("dataset CSV must end with a 'label' column")
        rows = [r for r in reader if r]
    d = len(header) - 1
    X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, num_classes)
