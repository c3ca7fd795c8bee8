"""Scenario configuration: JSON schema, validation and shipped presets.

A scenario document is a JSON object; every key is optional and falls back to
the defaults below. Resource vectors are 4-element arrays
``[cpu, memory_mib, disk_gib, bandwidth_mbps]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Any, Optional

ATTACKS = ("none", "co-residency", "multi-hijack", "grouped-cascade")
NORMALIZERS = ("minmax", "zscore", "clip")
POLICIES = ("both", "unregistered_only")
PRESETS = ("benign-baseline", "co-residency", "multi-hijack", "grouped-cascade",
           "consolidation-demo")
MAX_SEED = 2**64 - 1


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` names the offending key (dotted path)."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass
class ServerGroup:
    count: int = 30
    capacity: list[float] = field(default_factory=lambda: [32.0, 65536.0, 2000.0, 10000.0])


@dataclass
class Flavor:
    name: str = "small"
    capacity: list[float] = field(default_factory=lambda: [2.0, 4096.0, 50.0, 500.0])


def _default_flavors():
    return [
        Flavor("small", [2.0, 4096.0, 50.0, 500.0]),
        Flavor("medium", [4.0, 8192.0, 100.0, 1000.0]),
        Flavor("large", [8.0, 16384.0, 200.0, 2000.0]),
    ]


@dataclass
class ArrivalConfig:
    rate: float = 0.3              # expected applications per tick (Poisson)
    fan_out: int = 3               # tasks per application
    max_fan_out: int = 16
    demand_min: list[float] = field(default_factory=lambda: [2.0, 4096.0, 50.0, 500.0])
    demand_max: list[float] = field(default_factory=lambda: [12.0, 24576.0, 300.0, 3000.0])
    duration_min: int = 40
    duration_max: int = 120
    users: int = 10


@dataclass
class UsageConfig:
    base: float = 0.5              # mean usage as a fraction of VM capacity
    amplitude: float = 0.2
    period: int = 48
    noise: float = 0.05


@dataclass
class PredictorConfig:
    lags: int = 12
    learning_rate: float = 0.01
    epochs: int = 200
    retrain_every: int = 24
    train_window: int = 96
    normalizer: str = "zscore"


@dataclass
class AttackConfig:
    scenario: str = "none"
    count: int = 1                 # m for multi-hijack, chain length L for grouped-cascade
    launch_time: int = 61
    masquerade: bool = False
    flavor: Optional[str] = None   # defaults to the smallest catalogue flavor


@dataclass
class EnergyConfig:
    p_idle: float = 0.6
    p_max: float = 1.0
    migration_penalty: float = 0.01


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration: int = 300
    servers: list[ServerGroup] = field(default_factory=lambda: [ServerGroup()])
    flavors: list[Flavor] = field(default_factory=_default_flavors)
    arrivals: ArrivalConfig = field(default_factory=ArrivalConfig)
    usage: UsageConfig = field(default_factory=UsageConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    auditing: bool = True
    audit_interval: int = 1
    management_interval: int = 5
    underload_threshold: float = 0.2
    consolidation: bool = True
    overload_margin: float = 1.0
    breach_dwell_time: int = 5
    attack: AttackConfig = field(default_factory=AttackConfig)
    attacker_policy: str = "both"
    relocate_victims: bool = False
    link_probability: float = 0.3
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


# --------------------------------------------------------------------------
# parsing

_NESTED = {
    "servers": ServerGroup, "flavors": Flavor, "arrivals": ArrivalConfig,
    "usage": UsageConfig, "predictor": PredictorConfig, "attack": AttackConfig,
    "energy": EnergyConfig,
}


def _check_scalar(path, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ScenarioError(path, f"expected boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ScenarioError(path, f"expected integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError(path, f"expected number, got {value!r}")
        if not math.isfinite(value):
            raise ScenarioError(path, "must be finite")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ScenarioError(path, f"expected string, got {value!r}")
        return value
    raise TypeError(kind)


def _vector(path, value):
    if not isinstance(value, list) or len(value) != 4:
        raise ScenarioError(path, "expected a list of 4 numbers [cpu, memory, disk, bandwidth]")
    out = [_check_scalar(f"{path}[{i}]", v, float) for i, v in enumerate(value)]
    for i, v in enumerate(out):
        if v < 0:
            raise ScenarioError(f"{path}[{i}]", "capacity components must be >= 0")
    return out


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ScenarioError(path or "<root>", f"expected object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ScenarioError(f"{path}{key}", "unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        where = f"{path}{name}"
        ann = f.type if isinstance(f.type, str) else f.type.__name__
        if name in _NESTED:
            sub = _NESTED[name]
            if ann.startswith("list"):
                if not isinstance(value, list):
                    raise ScenarioError(where, "expected a list")
                kwargs[name] = [_build(sub, v, f"{where}[{i}].") for i, v in enumerate(value)]
            else:
                kwargs[name] = _build(sub, value, f"{where}.")
        elif ann == "list[float]":
            kwargs[name] = _vector(where, value)
        elif ann == "Optional[str]":
            kwargs[name] = None if value is None else _check_scalar(where, value, str)
        else:
            kwargs[name] = _check_scalar(where, value, _TYPES[ann])
    return cls(**kwargs)


def _require(cond, path, message):
    if not cond:
        raise ScenarioError(path, message)


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    """Check cross-field invariants; raises :class:`ScenarioError` on the first violation."""
    _require(0 <= cfg.seed <= MAX_SEED, "seed", "must be an unsigned 64-bit integer")
    _require(cfg.duration >= 0, "duration", "duration ≥ 0")
    _require(cfg.breach_dwell_time >= 1, "breach_dwell_time", "breach_dwell_time ≥ 1")
    _require(cfg.audit_interval >= 1, "audit_interval", "audit_interval ≥ 1")
    _require(cfg.management_interval >= 1, "management_interval", "management_interval ≥ 1")
    _require(0 <= cfg.underload_threshold <= 1, "underload_threshold",
             "underload_threshold must lie in [0, 1]")
    _require(cfg.overload_margin > 0, "overload_margin", "overload_margin > 0")
    _require(0 <= cfg.link_probability <= 1, "link_probability", "must lie in [0, 1]")
    _require(cfg.attacker_policy in POLICIES, "attacker_policy", f"one of {POLICIES}")
    _require(len(cfg.servers) > 0, "servers", "at least one server group")
    for i, g in enumerate(cfg.servers):
        _require(g.count >= 0, f"servers[{i}].count", "count ≥ 0")
        _require(all(c > 0 for c in g.capacity), f"servers[{i}].capacity",
                 "server capacity components must be > 0")
    _require(sum(g.count for g in cfg.servers) > 0, "servers", "at least one server")
    _require(len(cfg.flavors) > 0, "flavors", "flavor catalogue must be non-empty")
    names = [f.name for f in cfg.flavors]
    _require(len(set(names)) == len(names), "flavors", "flavor names must be unique")
    for i, f in enumerate(cfg.flavors):
        _require(any(c > 0 for c in f.capacity), f"flavors[{i}].capacity", "flavor has no capacity")
    ref = [max(f.capacity[d] for f in cfg.flavors) for d in range(4)]
    _require(all(r > 0 for r in ref), "flavors", "every resource needs a non-zero flavor")
    keys = sorted(sum(c / r for c, r in zip(f.capacity, ref)) for f in cfg.flavors)
    _require(all(a < b for a, b in zip(keys, keys[1:])), "flavors",
             "flavors must be strictly ordered by size")

    a = cfg.arrivals
    _require(a.rate >= 0, "arrivals.rate", "rate ≥ 0")
    _require(1 <= a.max_fan_out <= 16, "arrivals.max_fan_out", "max_fan_out in 1..16")
    _require(1 <= a.fan_out <= a.max_fan_out, "arrivals.fan_out", "fan_out in 1..max_fan_out")
    _require(all(lo <= hi for lo, hi in zip(a.demand_min, a.demand_max)), "arrivals.demand_max",
             "demand_max must be ≥ demand_min component-wise")
    _require(max(a.demand_min) > 0, "arrivals.demand_min", "application demand must be > 0")
    _require(1 <= a.duration_min <= a.duration_max, "arrivals.duration_min",
             "1 ≤ duration_min ≤ duration_max")
    _require(a.users >= 1, "arrivals.users", "users ≥ 1")

    u = cfg.usage
    _require(0 <= u.base <= 1, "usage.base", "base in [0, 1]")
    _require(u.amplitude >= 0, "usage.amplitude", "amplitude ≥ 0")
    _require(u.period >= 1, "usage.period", "period ≥ 1")
    _require(u.noise >= 0, "usage.noise", "noise ≥ 0")

    p = cfg.predictor
    _require(p.lags >= 1, "predictor.lags", "lags ≥ 1")
    _require(p.learning_rate > 0, "predictor.learning_rate", "learning_rate > 0")
    _require(p.epochs >= 0, "predictor.epochs", "epochs ≥ 0")
    _require(p.retrain_every >= 1, "predictor.retrain_every", "retrain_every ≥ 1")
    _require(p.train_window >= p.lags + 2, "predictor.train_window", "train_window ≥ lags + 2")
    _require(p.normalizer in NORMALIZERS, "predictor.normalizer", f"one of {NORMALIZERS}")

    k = cfg.attack
    _require(k.scenario in ATTACKS, "attack.scenario", f"one of {ATTACKS}")
    _require(k.launch_time >= 0, "attack.launch_time", "launch_time ≥ 0")
    _require(k.count >= 1, "attack.count", "count ≥ 1")
    if k.scenario == "grouped-cascade":
        _require(k.count >= 2, "attack.count", "grouped-cascade chain length ≥ 2")
    if k.flavor is not None:
        _require(k.flavor in names, "attack.flavor", "unknown flavor")

    e = cfg.energy
    _require(0 <= e.p_idle <= e.p_max, "energy.p_idle", "0 ≤ p_idle ≤ p_max")
    _require(e.migration_penalty >= 0, "energy.migration_penalty", "migration_penalty ≥ 0")
    return cfg


def from_dict(data: dict[str, Any]) -> ScenarioConfig:
    return validate(_build(ScenarioConfig, data, ""))


def loads(text: str) -> ScenarioConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}", exc.msg) from exc
    return from_dict(data)


def load(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ScenarioError("preset", f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("vmshield.presets").joinpath(f"{name}.json").read_text("utf-8")


def preset(name: str) -> ScenarioConfig:
    return loads(preset_text(name))


def with_overrides(cfg: ScenarioConfig, overrides: dict[str, Any]) -> ScenarioConfig:
    """Apply dotted-path overrides (``{"attack.count": 3}``) and re-validate."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ScenarioError(key, "unknown field")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ScenarioError(key, "unknown field")
        node[parts[-1]] = value
    return from_dict(data)
