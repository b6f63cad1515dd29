"""YAML experiment configs: loading with line diagnostics, dotted overrides,
sweep expansion and the round-trippable config echo.

Sections mirror FederationConfig: ``data``, ``defense``, ``attack`` (with a
nested ``backdoor``), ``benign_train`` and ``attacker_train``; everything else
is a top-level scalar field. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
import re
from dataclasses import replace
from pathlib import Path

import yaml

from .attacks import AttackSpec
from .datakit import BackdoorSpec
from .defenses import DefenseSpec
from .errors import ConfigError
from .learner import TrainConfig
from .simulator import DataConfig, FederationConfig, backdoor_kind_for, default_backdoor

SECTIONS = {
    "data": DataConfig,
    "defense": DefenseSpec,
    "attack": AttackSpec,
    "benign_train": TrainConfig,
    "attacker_train": TrainConfig,
}
REQUIRED = ("defense.kind",)

_SWEEP = re.compile(r"^\s*(\S+)\s*\.\.\s*(\S+)\s+step\s+(\S+)\s*$")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _key_lines(text: str) -> dict[str, int]:
    """Dotted key -> 1-based line number, for diagnostics."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}{k.value}"
                out[key] = k.start_mark.line + 1
                walk(v, key + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: {problem}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _check_keys(raw, _key_lines(text), source)
    return raw


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def _check_keys(raw: dict, lines: dict, source: str) -> None:
    def bad(key, what="unknown key"):
        line = lines.get(key)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {what} {key!r}")

    top = _field_names(FederationConfig)
    for key, val in raw.items():
        if key not in top:
            bad(str(key))
        if key in SECTIONS:
            if not isinstance(val, dict):
                bad(key, "expected a mapping for section")
            allowed = _field_names(SECTIONS[key])
            for sub, subval in val.items():
                if sub not in allowed:
                    bad(f"{key}.{sub}")
                if key == "attack" and sub == "backdoor":
                    if not isinstance(subval, dict):
                        bad("attack.backdoor", "expected a mapping for section")
                    for bk in subval:
                        if bk not in _field_names(BackdoorSpec):
                            bad(f"attack.backdoor.{bk}")
        elif isinstance(val, dict):
            bad(key, "unexpected mapping for scalar key")


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def split_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, val = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    return key, val.strip()


def sweep_values(spec: str) -> list | None:
    """``lo..hi step s`` -> the inclusive arithmetic sequence, or None if not a sweep."""
    m = _SWEEP.match(spec)
    if not m:
        return None
    lo, hi, step = (parse_value(g) for g in m.groups())
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (lo, hi, step)):
        raise ConfigError(f"sweep {spec!r} needs numeric bounds and step")
    if step <= 0 or hi < lo:
        raise ConfigError(f"sweep {spec!r} needs step > 0 and lo <= hi")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    if all(isinstance(v, int) for v in (lo, hi, step)):
        return [lo + i * step for i in range(count)]
    return [round(lo + i * step, 12) for i in range(count)]


def expand_overrides(items) -> list[list[tuple[str, object]]]:
    """One list of (key, value) pairs per point of the cartesian sweep grid."""
    axes = []
    for item in items or ():
        key, text = split_override(item)
        values = sweep_values(text)
        axes.append([(key, v) for v in values] if values is not None else [(key, parse_value(text))])
    return [list(combo) for combo in itertools.product(*axes)]


def apply_overrides(raw: dict, pairs) -> dict:
    out = _deepcopy(raw)
    for key, value in pairs:
        set_dotted(out, key, value)
    _check_keys(out, {}, "override")
    return out


def _deepcopy(raw):
    if isinstance(raw, dict):
        return {k: _deepcopy(v) for k, v in raw.items()}
    if isinstance(raw, list):
        return [_deepcopy(v) for v in raw]
    return raw


def _build(cls, values: dict, where: str, **extra):
    try:
        return cls(**{**values, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_config(raw: dict) -> FederationConfig:
    """Validated FederationConfig from a parsed mapping."""
    _check_keys(raw, {}, "config")
    for key in REQUIRED:
        section, _, name = key.partition(".")
        if name not in (raw.get(section) or {}):
            raise ConfigError(f"missing required key {key!r}")
    data = _build(DataConfig, raw.get("data") or {}, "data")
    defense = _build(DefenseSpec, raw["defense"], "defense")
    attack_raw = dict(raw.get("attack") or {})
    bd_raw = dict(attack_raw.pop("backdoor", None) or {})
    kind = attack_raw.get("kind", "none")
    bd_kind = bd_raw.get("kind", backdoor_kind_for(kind))
    try:
        base = default_backdoor(bd_kind, data, int(bd_raw.get("target_label", 0)))
        backdoor = replace(base, **bd_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attack.backdoor: {exc}") from None
    attack = _build(AttackSpec, attack_raw, "attack", backdoor=backdoor)
    kwargs = {k: v for k, v in raw.items() if k not in SECTIONS}
    for name in ("benign_train", "attacker_train"):
        if name in raw:
            default = getattr(FederationConfig(), name)
            kwargs[name] = _build(TrainConfig, {**dataclasses.asdict(default), **(raw[name] or {})}, name)
    return _build(FederationConfig, kwargs, "config", data=data, defense=defense, attack=attack)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: FederationConfig) -> dict:
    """Fully-resolved, YAML-friendly view of ``cfg``; build_config inverts it."""
    return _plain(dataclasses.asdict(cfg))


def dump_yaml(cfg: FederationConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)
