"""Layered YAML run configuration.

A run config starts from the packaged defaults; each further layer (a
packaged preset name or a file path) may only set fields the defaults
already define. Values are coerced to the type of the default.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import yaml

from . import ctrl, demand, sim
from .ppo.state import DESIGNS, StateDesign
from .ppo.trainer import PpoConfig
from .scenario import GridSpec, Scenario

CONTROLLERS = ("npc", "pi", "ppo")
# fields that may be null in any layer
NULLABLE = {"checkpoint"}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending dotted key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _packaged(name: str) -> str:
    return resources.files("perimeter_lab").joinpath("configs", f"{name}.yaml").read_text()


def presets() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("perimeter_lab").joinpath("configs").iterdir()
                  if p.name.endswith(".yaml") and p.name != "defaults.yaml")


def defaults() -> dict:
    return yaml.safe_load(_packaged("defaults"))


def _coerce(path: str, value: Any, like: Any) -> Any:
    if like is None:
        return value if value is None else str(value)
    if value is None:
        if path in NULLABLE:
            return None
        raise ConfigError(path, "may not be null")
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(like, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(like, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        proto = like[0] if like else None
        return [_coerce(f"{path}[{i}]", v, proto) if proto is not None else v for i, v in enumerate(value)]
    raise ConfigError(path, f"unsupported default type {type(like).__name__}")


def merge(base: dict, layer: dict, prefix: str = "") -> dict:
    """Return ``base`` updated by ``layer``; unknown keys are errors."""
    if not isinstance(layer, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    out = copy.deepcopy(base)
    for key, value in layer.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown field")
        if isinstance(base[key], dict):
            out[key] = merge(base[key], value if value is not None else {}, path + ".")
        else:
            out[key] = _coerce(path, value, base[key])
    return out


def load_layer(ref: str | Path) -> dict:
    """A packaged preset name (e.g. ``desk``) or a path to a YAML file."""
    p = Path(ref)
    if p.suffix in (".yaml", ".yml") or p.exists():
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {ref}: {exc}") from exc
    elif str(ref) in presets():
        text = _packaged(str(ref))
    else:
        raise ConfigError("--config", f"no file or preset named {ref!r} (presets: {', '.join(presets())})")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"{ref} is not valid YAML: {exc}") from exc
    return data or {}


def resolve(layers: Iterable[str | Path | dict] = ()) -> dict:
    cfg = defaults()
    for layer in layers:
        cfg = merge(cfg, layer if isinstance(layer, dict) else load_layer(layer))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["controller"] not in CONTROLLERS:
        raise ConfigError("controller", f"must be one of {', '.join(CONTROLLERS)}")
    if cfg["state_design"] not in DESIGNS:
        raise ConfigError("state_design", f"must be one of {', '.join(sorted(DESIGNS))}")
    if not cfg["seeds"]:
        raise ConfigError("seeds", "needs at least one seed")
    if cfg["density_max"] <= 0:
        raise ConfigError("density_max", "must be positive")
    # constructing the objects runs their own range checks
    for name, build in (("scenario", scenario_from), ("ppo", ppo_from)):
        try:
            build(cfg)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(name, str(exc)) from exc


def dumps(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def loads(text: str) -> dict:
    """Parse a serialised full config (as produced by :func:`dumps`)."""
    return resolve([yaml.safe_load(text) or {}])


def config_hash(cfg: dict, ignore: Iterable[str] = ("controller", "checkpoint")) -> str:
    """Short provenance digest of the fields that change simulated results."""
    trimmed = {k: v for k, v in cfg.items() if k not in set(ignore)}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- object construction -----------------------------------------------------------

def scenario_from(cfg: dict) -> Scenario:
    sc = cfg["scenario"]
    d = dict(sc["demand"])
    factor = d.pop("scale")
    profile = demand.DemandProfile(**d)
    if factor != 1.0:
        profile = demand.scale(profile, factor)
    return Scenario(
        grid=GridSpec(**sc["grid"]),
        profile=profile,
        sim=sim.SimConfig(**sc["sim"]),
        control_cycle=sc["control_cycle"],
        pi=ctrl.PiParams(**sc["pi"]),
        cap_factor=sc["cap_factor"],
        eval_cap_factor=sc["eval_cap_factor"],
    )


def ppo_from(cfg: dict) -> PpoConfig:
    p = dict(cfg["ppo"])
    p["hidden"] = tuple(p["hidden"])
    return PpoConfig(**p)


def design_from(cfg: dict, scenario: Scenario | None = None) -> StateDesign:
    scenario = scenario or scenario_from(cfg)
    return StateDesign.for_profile(cfg["state_design"], scenario.profile, scenario.control_cycle,
                                   cfg["density_max"])


def with_overrides(cfg: dict, **flat: Any) -> dict:
    """Apply dotted-key overrides, skipping ``None`` values."""
    layer: dict = {}
    for dotted, value in flat.items():
        if value is None:
            continue
        node = layer
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    out = merge(cfg, layer)
    validate(out)
    return out


def ppo_config_dict(cfg: PpoConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d
