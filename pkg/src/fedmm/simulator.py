"""Federated round loop: sampling, attacker scheduling, local training, aggregation,
MA/BA logging, plus the relative-improvement ranking score."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import attacks, datakit, defenses
from .attacks import AttackSpec
from .datakit import EDGE_CASE, PIXEL_TRIGGER, BackdoorSpec, Dataset
from .defenses import ClientUpdate, DefenseSpec
from .errors import RoundError, UndefinedScore
from .learner import ModelSpec, TrainConfig, evaluate, init_model, train_local

# stream tags for derive_seed
_TRAIN, _TEST, _PARTITION, _POISON, _BD_TEST, _INIT, _SAMPLE, _LOCAL, _AGG, _CLEAN_BD = range(10)


def derive_seed(*parts: int) -> int:
    """64-bit seed hashed from integer parts via numpy's SeedSequence mixer."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 3
    samples_per_class: int = 400
    feature_dim: int = 10
    class_separation: float = 6.0
    test_per_class: int = 300
    backdoor_test_size: int = 300


@dataclass(frozen=True)
class FederationConfig:
    total_clients: int = 40
    clients_per_round: int = 10
    num_rounds: int = 60
    attackers_per_round: int = 0
    attack_interval: int = 1
    dirichlet_alpha: float = 0.5
    data: DataConfig = field(default_factory=DataConfig)
    hidden_dim: int = 32
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    benign_train: TrainConfig = field(default_factory=lambda: TrainConfig(0.05, 2, 16))
    attacker_train: TrainConfig = field(default_factory=lambda: TrainConfig(0.05, 12, 16))
    seed: int = 0

    def __post_init__(self):
        if self.clients_per_round > self.total_clients:
            raise ValueError("clients_per_round must be <= total_clients")
        if not 0 <= self.attackers_per_round <= self.clients_per_round:
            raise ValueError("attackers_per_round must lie in [0, clients_per_round]")
        if self.attack_interval < 1 or self.num_rounds < 0:
            raise ValueError("attack_interval must be >= 1 and num_rounds >= 0")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.defense.kind in defenses.MULTI_METRIC_FAMILY and self.clients_per_round <= 3:
            raise ValueError("multi-metric defenses need clients_per_round > 3")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    @property
    def model(self) -> ModelSpec:
        return ModelSpec(self.data.feature_dim, self.hidden_dim, self.data.num_classes)

    @property
    def attack_active(self) -> bool:
        return self.attack.kind != attacks.NONE and self.attackers_per_round > 0

    def is_attack_round(self, t: int) -> bool:
        return self.attack_active and t % self.attack_interval == 0


@dataclass
class RoundReport:
    round: int
    ma: float
    ba: float
    attacked: bool
    selected_ids: list[int]
    scores: dict[int, float]
    dominant_metric: str
    sampled_ids: list[int] = field(default_factory=list)


def default_backdoor(kind: str, data: DataConfig, target_label: int = 0) -> BackdoorSpec:
    """Backdoor geometry used when a config leaves it unspecified.

    pixel_trigger: the last four features (which carry no class signal) set to
    3.0. edge_case: a ball of radius 1 lying 7 units past the class-1 mean, out
    along the direction that separates class 1, relabelled to the target.
    """
    d = data.feature_dim
    if kind == PIXEL_TRIGGER:
        coords = tuple((i, 3.0) for i in range(max(data.num_classes, d - 4), d))
        return BackdoorSpec(PIXEL_TRIGGER, target_label, coords, poison_fraction=0.5)
    source = 1 if target_label != 1 else 0
    means = datakit.class_means(data.num_classes, d, data.class_separation)
    center = means[source].copy()
    center[source] += 7.0
    return BackdoorSpec(
        EDGE_CASE, target_label, edge_center=tuple(center), edge_radius=1.0,
        poison_fraction=0.5, source_label=source,
    )


def backdoor_kind_for(attack_kind: str) -> str:
    return EDGE_CASE if attack_kind == attacks.EDGE_CASE_PGD else PIXEL_TRIGGER


def desk_scenario(
    attack_kind: str = attacks.NONE,
    defense: DefenseSpec | str = defenses.FEDAVG,
    seed: int = 0,
    attackers_per_round: int | None = None,
    **overrides,
) -> FederationConfig:
    """The calibrated desk-scale setting: 40 clients, 10 per round, 60 rounds.

    Three attackers (30%) join every round unless ``attack_kind`` is none.
    Extra keyword arguments replace FederationConfig fields.
    """
    if isinstance(defense, str):
        defense = DefenseSpec(defense, f=3)
    data = overrides.pop("data", DataConfig())
    bd = default_backdoor(backdoor_kind_for(attack_kind), data)
    if attackers_per_round is None:
        attackers_per_round = 0 if attack_kind == attacks.NONE else 3
    return FederationConfig(
        attackers_per_round=attackers_per_round,
        data=data,
        defense=defense,
        attack=overrides.pop("attack", AttackSpec(attack_kind, backdoor=bd)),
        seed=seed,
        **overrides,
    )


def sample_clients(total: int, k: int, rng: np.random.Generator) -> list[int]:
    return [int(c) for c in rng.choice(total, size=k, replace=False)]


def round_participants(cfg: FederationConfig, t: int) -> tuple[list[int], bool]:
    """Clients taking part in round ``t``; attackers take the first slots on attack rounds."""
    rng = np.random.default_rng(derive_seed(cfg.seed, _SAMPLE, t))
    picked = sample_clients(cfg.total_clients, cfg.clients_per_round, rng)
    if not cfg.is_attack_round(t):
        return picked, False
    bad = list(range(cfg.attackers_per_round))
    rest = [c for c in picked if c not in bad]
    return bad + rest[: cfg.clients_per_round - len(bad)], True


@dataclass
class Federation:
    """Materialized data, shards and test sets for one configuration."""

    cfg: FederationConfig
    train: Dataset
    test: Dataset
    shards: list
    poisoned: dict
    backdoor_test: Dataset
    backdoor: BackdoorSpec

    @classmethod
    def build(cls, cfg: FederationConfig) -> "Federation":
        dc = cfg.data
        train = datakit.make_synthetic_dataset(
            dc.num_classes, dc.samples_per_class, dc.feature_dim, dc.class_separation,
            derive_seed(cfg.seed, _TRAIN),
        )
        test = datakit.make_synthetic_dataset(
            dc.num_classes, dc.test_per_class, dc.feature_dim, dc.class_separation,
            derive_seed(cfg.seed, _TEST),
        )
        shards = datakit.dirichlet_partition(
            train, cfg.total_clients, cfg.dirichlet_alpha, derive_seed(cfg.seed, _PARTITION)
        )
        backdoor = cfg.attack.backdoor
        backdoor.validate_for(dc.feature_dim, dc.num_classes)
        attacker_ids = range(cfg.attackers_per_round) if cfg.attack_active else range(0)

        frac = cfg.attack.benign_backdoor_fraction
        if frac > 0 and cfg.attack_active:
            shards = [
                s if s.client_id in attacker_ids
                else datakit.inject_clean_backdoor(s, backdoor, frac, derive_seed(cfg.seed, _CLEAN_BD, s.client_id))
                for s in shards
            ]

        parts = [backdoor]
        if cfg.attack.kind == attacks.DBA:
            parts = attacks.dba_trigger_parts(backdoor, cfg.attack.dba_partitions)
        poisoned = {
            cid: datakit.inject_backdoor(
                shards[cid], parts[cid % len(parts)], derive_seed(cfg.seed, _POISON, cid)
            )
            for cid in attacker_ids
        }
        bd_test = datakit.make_backdoor_testset(
            backdoor, test, dc.backdoor_test_size, derive_seed(cfg.seed, _BD_TEST)
        )
        return cls(cfg, train, test, shards, poisoned, bd_test, backdoor)


def resolved_attack(cfg: FederationConfig) -> AttackSpec:
    a = cfg.attack
    if a.kind in (attacks.PGD, attacks.EDGE_CASE_PGD) and not a.pgd_boost:
        return replace(a, scale_factor=None)
    if a.kind in attacks.BOOSTED_KINDS and a.scale_factor is None:
        return replace(a, scale_factor=cfg.total_clients / cfg.clients_per_round)
    return a


def run_federation(
    cfg: FederationConfig, on_round: Callable[[RoundReport], None] | None = None
) -> list[RoundReport]:
    """Run ``cfg.num_rounds`` rounds (numbered from 1) and return one report per round."""
    fed = Federation.build(cfg)
    spec = cfg.model
    attack = resolved_attack(cfg)
    w = init_model(spec, derive_seed(cfg.seed, _INIT))
    history: dict = {}
    reports = []
    for t in range(1, cfg.num_rounds + 1):
        try:
            ids, attacked = round_participants(cfg, t)
            updates = []
            for slot, cid in enumerate(ids):
                seed = derive_seed(cfg.seed, _LOCAL, t, cid)
                if attacked and slot < cfg.attackers_per_round:
                    shard = fed.poisoned[cid]
                    tc = replace(cfg.attacker_train, seed=seed)
                    local = attacks.craft_malicious_update(w, spec, shard, attack, tc)
                else:
                    shard = fed.shards[cid]
                    local = train_local(w, spec, shard, replace(cfg.benign_train, seed=seed))
                updates.append(ClientUpdate(cid, local, len(shard)))
            agg_rng = np.random.default_rng(derive_seed(cfg.seed, _AGG, t))
            result = defenses.aggregate(w, updates, cfg.defense, history=history, rng=agg_rng)
            w = result.model
            report = RoundReport(
                t,
                evaluate(w, spec, fed.test),
                evaluate(w, spec, fed.backdoor_test),
                attacked,
                list(result.selected_ids),
                dict(result.scores),
                result.dominant_metric,
                sorted(ids),
            )
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(t, exc) from exc
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return reports


def summarize(reports: list[RoundReport], tail: int = 10) -> dict:
    if not reports:
        return {"rounds": 0}
    last = reports[-tail:]
    dom = Counter(r.dominant_metric for r in reports if r.attacked)
    return {
        "rounds": len(reports),
        "final_ma": reports[-1].ma,
        "final_ba": reports[-1].ba,
        "mean_ba_last_10": float(np.mean([r.ba for r in last])),
        "mean_ma_last_10": float(np.mean([r.ma for r in last])),
        "dominant_metric_counts": dict(sorted(dom.items())),
    }


def relative_score(value: float, base: float) -> float:
    if base == 0:
        raise UndefinedScore("baseline value is zero; relative improvement undefined")
    return (value - base) / base


def ranking_breakdown(method: dict, baseline: dict) -> dict:
    """attack -> (MA score, BA score) for ``method`` against ``baseline``.

    Both arguments map an attack name to an (MA, BA) pair.
    """
    out = {}
    for attack_name, (ma, ba) in method.items():
        if attack_name not in baseline:
            raise KeyError(f"baseline has no entry for attack {attack_name!r}")
        base_ma, base_ba = baseline[attack_name]
        out[attack_name] = (relative_score(ma, base_ma), relative_score(ba, base_ba))
    return out


def ranking_score(method: dict, baseline: dict) -> float:
    """Sum over attacks of (relative MA change - relative BA change)."""
    return math.fsum(ma - ba for ma, ba in ranking_breakdown(method, baseline).values())
