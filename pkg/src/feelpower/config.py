"""Scenario files: a YAML mapping with a fixed, validated schema.

Example::

    network:
      num_nodes: 10
      num_devices: 20
      power_budget_mw: 50
      noise_dbm: -77
      dataset_cap: 200
    allocator: mm
    seeds: [0, 1]
    rounds: 10
    fom:
      eta: 1.0e-3

Every section is optional; missing keys take the package defaults. Unknown
keys are rejected. Numbers may be written in any form YAML or Python
accepts (``4e6`` is fine even though YAML reads it as a string).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import yaml

from .channel import ConfigError, NetworkConfig, build_config
from .fedsim import SimSettings, SyntheticTask
from .fom_solver import FomSettings
from .lossmodel import BoundParams
from .mm_solver import MmSettings

ALLOCATORS = ("uniform", "srm", "mm", "fom")
ENV_PREFIX = "FEELPOWER_"

# section -> key -> type; "float_list" accepts a scalar or a list of numbers
NETWORK_KEYS = {
    "num_nodes": int,
    "num_devices": int,
    "num_antennas": int,
    "power_budget_mw": float,
    "bandwidth_hz": float,
    "tx_time_s": float,
    "sample_size_mb": "float_list",
    "binary_mb": bool,
    "noise_dbm": float,
    "path_loss_db": "float_list",
    "dataset_cap": "float_list",
    "initial_samples": "float_list",
    "fading_variance": str,
    "node_devices": "partition",
}
SECTION_KEYS = {
    "mm": {
        "outer_tol": float,
        "inner_tol": float,
        "max_outer": int,
        "max_inner": int,
        "inner_penalty": float,
        "al_updates": int,
        "half_d2_constraint": bool,
        "node_budgets": "float_list",
    },
    "fom": {"eta": float, "mu": float, "tol": float, "max_iter": int, "momentum_enabled": bool, "literal_init": bool},
    "srm": {"restarts": int},
    "task": {"input_dim": int, "class_count": int, "separation": float, "noise_scale": float, "l2": float, "seed": int},
    "sim": {"lr": float, "local_epochs": int, "channel_policy": str, "xi2": float, "test_size": int},
    "bound": {"xi1": float, "xi2": float, "L_smooth": float, "C0": float, "alpha": float, "t_max": int},
}
TOP_KEYS = {"network", "allocator", "seeds", "rounds", "out", *SECTION_KEYS}


def _coerce(value, kind, where):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind is int:
            if isinstance(value, bool):
                raise TypeError
            f = float(value)
            if f != int(f):
                raise TypeError
            return int(f)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "float_list":
            if isinstance(value, (list, tuple)):
                return [_coerce(v, float, where) for v in value]
            return _coerce(value, float, where)
        if kind == "partition":
            return [[_coerce(k, int, where) for k in grp] for grp in value]
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{where}: invalid value {value!r}")


def _section(raw, keys, where) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(raw) - set(keys)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(sorted(map(str, unknown)))}")
    return {k: _coerce(v, keys[k], f"{where}.{k}") for k, v in raw.items()}


@dataclass
class Scenario:
    network: NetworkConfig
    allocator: str = "mm"
    seeds: list[int] = field(default_factory=lambda: [0])
    rounds: int = 10
    out: str = "results"
    mm: MmSettings = MmSettings()
    fom: FomSettings = FomSettings()
    srm_restarts: int = 8
    task: SyntheticTask = SyntheticTask()
    sim: SimSettings = SimSettings()
    bound: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)

    @property
    def scenario_hash(self) -> str:
        """Short digest of the fully resolved scenario (seeds and output dir excluded)."""
        body = {k: v for k, v in self.resolved.items() if k not in ("seeds", "out")}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def bound_params(self) -> BoundParams:
        b = self.bound
        return BoundParams(xi1=b.get("xi1", 1.0), xi2=b.get("xi2", 0.1), L_smooth=b.get("L_smooth", 2.0), C0=b.get("C0", 1.0))


def _network(raw: dict) -> NetworkConfig:
    partition = raw.pop("node_devices", None)
    if partition is not None:
        if raw["num_nodes"] != len(partition) or raw["num_devices"] != sum(len(g) for g in partition):
            raise ConfigError("network.node_devices disagrees with num_nodes/num_devices")
    cfg = build_config(**raw)
    if partition is not None:
        cfg = cfg.replace(node_devices=tuple(tuple(g) for g in partition))
    return cfg


def scenario_from_dict(raw: Mapping | None, overrides: Mapping | None = None) -> Scenario:
    """Validate a parsed scenario mapping and build the typed objects.

    ``overrides`` (``allocator``, ``seeds``, ``out``, ``momentum``) win over
    the file contents.
    """
    raw = dict(raw or {})
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(map(str, unknown)))}")
    net = _section(raw.get("network"), NETWORK_KEYS, "network")
    net_raw = dict(net)
    if "num_nodes" in net and "num_devices" not in net and "node_devices" not in net:
        net.setdefault("num_devices", max(20, net["num_nodes"]))
    if "node_devices" in net and "num_devices" not in net:
        net["num_devices"] = sum(len(g) for g in net["node_devices"])
    if "node_devices" in net and "num_nodes" not in net:
        net["num_nodes"] = len(net["node_devices"])
    try:
        cfg = _network(dict(net))
    except ConfigError:
        raise
    except ValueError as exc:  # DomainError from unit conversion
        raise ConfigError(f"network: {exc}") from None

    sec = {name: _section(raw.get(name), keys, name) for name, keys in SECTION_KEYS.items()}
    overrides = dict(overrides or {})
    allocator = overrides.get("allocator") or raw.get("allocator", "mm")
    if allocator not in ALLOCATORS:
        raise ConfigError(f"unknown allocator {allocator!r}; choose from {', '.join(ALLOCATORS)}")
    seeds = overrides.get("seeds")
    if seeds is None:
        seeds = raw.get("seeds", [0])
        seeds = [seeds] if not isinstance(seeds, list) else seeds
        seeds = [_coerce(s, int, "seeds") for s in seeds]
    if not seeds:
        raise ConfigError("seeds must not be empty")
    rounds = _coerce(raw.get("rounds", 10), int, "rounds")
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    out = overrides.get("out") or _coerce(raw.get("out", "results"), str, "out")

    fom_kw = dict(sec["fom"])
    if overrides.get("momentum") is False:
        fom_kw["momentum_enabled"] = False
    mm_kw = dict(sec["mm"])
    if "node_budgets" in mm_kw:
        nb = mm_kw["node_budgets"]
        mm_kw["node_budgets"] = tuple(nb) if isinstance(nb, list) else (nb,)
    try:
        mm = MmSettings(**mm_kw)
        fom = FomSettings(**fom_kw)
        task = SyntheticTask(**sec["task"])
        srm_restarts = sec["srm"].get("restarts", 8)
        sim = SimSettings(mm=mm, fom=fom, srm_restarts=srm_restarts, **sec["sim"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    resolved = {
        "network": _network_dict(cfg, net_raw),
        "allocator": allocator,
        "seeds": list(seeds),
        "rounds": rounds,
        "out": out,
        "mm": _plain(asdict(mm)),
        "fom": _plain(asdict(fom)),
        "srm": {"restarts": srm_restarts},
        "task": _plain(asdict(task)),
        "sim": {k: v for k, v in _plain(asdict(sim)).items() if k not in ("mm", "fom", "srm_restarts")},
        "bound": dict(sec["bound"]),
    }
    return Scenario(
        network=cfg,
        allocator=allocator,
        seeds=list(seeds),
        rounds=rounds,
        out=out,
        mm=mm,
        fom=fom,
        srm_restarts=srm_restarts,
        task=task,
        sim=sim,
        bound=dict(sec["bound"]),
        resolved=resolved,
    )


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _network_dict(cfg: NetworkConfig, given: dict) -> dict:
    """Resolved network parameters in linear units, plus the human-unit inputs."""
    return {
        "given": _plain(given),
        "node_devices": [list(g) for g in cfg.node_devices],
        "num_antennas": cfg.num_antennas,
        "power_budget": cfg.power_budget,
        "bandwidth": cfg.bandwidth,
        "tx_time": cfg.tx_time,
        "bits_per_sample": list(cfg.bits_per_sample),
        "noise_power": cfg.noise_power,
        "path_loss": list(cfg.path_loss),
        "dataset_caps": list(cfg.dataset_caps),
        "initial_samples": list(cfg.initial_samples),
        "fading_variance": cfg.fading_variance,
    }


def load_scenario(path: str | None, overrides: Mapping | None = None) -> Scenario:
    """Read a YAML scenario; ``None`` means all defaults.

    Raises :class:`ConfigError` for a missing file, a YAML syntax error or a
    schema violation.
    """
    if path is None:
        return scenario_from_dict({}, overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return scenario_from_dict(raw, overrides)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Read ``FEELPOWER_CONFIG``, ``_SEED``, ``_OUT``, ``_ALLOCATOR`` and ``_JOBS``."""
    env = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for key in ("CONFIG", "OUT", "ALLOCATOR"):
        if env.get(ENV_PREFIX + key):
            out[key.lower()] = env[ENV_PREFIX + key]
    for key in ("SEED", "JOBS"):
        val = env.get(ENV_PREFIX + key)
        if val:
            try:
                out[key.lower()] = int(val)
            except ValueError:
                raise ConfigError(f"{ENV_PREFIX}{key} must be an integer, got {val!r}") from None
    return out

