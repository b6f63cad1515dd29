"""Malicious-client strategies: model replacement, DBA, PGD and edge-case PGD."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datakit import EDGE_CASE, PIXEL_TRIGGER, BackdoorSpec
from .errors import DimensionMismatch, Infeasible
from .learner import ModelSpec, TrainConfig, train_local
from .vecmath import as_vector, check_same_dim

NONE = "none"
MODEL_REPLACEMENT = "model_replacement"
DBA = "dba"
PGD = "pgd"
EDGE_CASE_PGD = "edge_case_pgd"
ATTACK_KINDS = (NONE, MODEL_REPLACEMENT, DBA, PGD, EDGE_CASE_PGD)
BOOSTED_KINDS = (MODEL_REPLACEMENT, PGD, EDGE_CASE_PGD)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = NONE
    scale_factor: float | None = None  # None -> N / K, filled in by the simulator
    # PGD variants only: apply scale_factor before the final projection
    pgd_boost: bool = True
    pgd_radius: float = 2.0
    dba_partitions: int = 4
    backdoor: BackdoorSpec = field(default_factory=BackdoorSpec)
    # fraction of each benign shard given correctly-labelled backdoor inputs
    benign_backdoor_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind in (PGD, EDGE_CASE_PGD) and self.pgd_radius <= 0:
            raise ValueError("pgd_radius must be positive")
        if self.kind == DBA and self.dba_partitions < 1:
            raise ValueError("dba_partitions must be >= 1")
        if self.kind == EDGE_CASE_PGD and self.backdoor.kind != EDGE_CASE:
            raise ValueError("edge_case_pgd needs an edge_case backdoor")
        if self.kind in (MODEL_REPLACEMENT, DBA, PGD) and self.backdoor.kind != PIXEL_TRIGGER:
            raise ValueError(f"{self.kind} needs a pixel_trigger backdoor")
        if self.scale_factor is not None and self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")


def scale_update(global_model, local_model, factor: float) -> np.ndarray:
    """global + factor * (local - global)."""
    g = as_vector(global_model)
    w = as_vector(local_model)
    check_same_dim(g, w)
    if factor == 1.0:
        return w.copy()
    return g + factor * (w - g)


def project_l2_ball(global_model, candidate, radius: float) -> np.ndarray:
    """Radial projection of ``candidate`` onto the L2 ball of ``radius`` around ``global_model``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    g = np.asarray(global_model, dtype=np.float64)
    c = np.asarray(candidate, dtype=np.float64)
    if g.shape != c.shape:
        raise DimensionMismatch(f"dimension mismatch: {g.shape} vs {c.shape}")
    diff = c - g
    norm = float(np.linalg.norm(diff))
    if norm <= radius:
        return c.copy()
    scale = radius / norm
    out = g + diff * scale
    # shrink past rounding so a second projection is a no-op
    while float(np.linalg.norm(out - g)) > radius and scale > 0.0:
        scale = np.nextafter(scale, 0.0) * (1 - 1e-15)
        out = g + diff * scale
    return out


def dba_trigger_parts(spec: BackdoorSpec, partitions: int) -> list[BackdoorSpec]:
    """Split the trigger into ``partitions`` contiguous, disjoint coordinate groups."""
    coords = spec.trigger_coords
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    if partitions > len(coords):
        raise Infeasible(f"cannot split {len(coords)} trigger coordinates into {partitions} parts")
    if partitions == 1:
        return [spec]
    bounds = np.linspace(0, len(coords), partitions + 1).round().astype(int)
    return [replace(spec, trigger_coords=coords[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]


def craft_malicious_update(
    global_model, spec: ModelSpec, shard, attack: AttackSpec, cfg: TrainConfig
) -> np.ndarray:
    """Train on the (already poisoned) shard and apply the attack's post-processing.

    PGD variants project onto the pgd_radius ball after each epoch, then boost
    the update by ``scale_factor`` (when set) and project once more, so the
    submission sits at most pgd_radius from the global model. Model replacement
    scales the final update by ``scale_factor``.
    """
    g = as_vector(global_model)
    if attack.kind in (PGD, EDGE_CASE_PGD):
        radius = attack.pgd_radius
        local = train_local(g, spec, shard, cfg, after_epoch=lambda w: project_l2_ball(g, w, radius))
        if attack.scale_factor is not None:
            local = scale_update(g, local, attack.scale_factor)
        return project_l2_ball(g, local, radius)
    local = train_local(g, spec, shard, cfg)
    if attack.kind == MODEL_REPLACEMENT:
        if attack.scale_factor is None:
            raise ValueError("model_replacement needs a resolved scale_factor")
        return scale_update(g, local, attack.scale_factor)
    return local
