"""Run configuration: strict YAML loading into dataclasses, plus a JSON schema export."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .adversarial import AttackConfig
from .crossbar import CrossbarSpec
from .hw_cost import CostModelConfig
from .nas import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 2
    per_class: int = 200
    test_per_class: Optional[int] = 100
    size: int = 16
    margin: float = 0.2
    noise: float = 0.1
    cifar_dir: Optional[str] = None
    subset_per_class: Optional[int] = None
    validation_size: int = 64

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ValueError("data.source must be 'synthetic' or 'cifar10'")
        if self.source == "cifar10" and not self.cifar_dir:
            raise ValueError("data.cifar_dir is required for cifar10")


@dataclass
class NetConfig:
    width: int = 8
    input_mean: float = 0.5
    input_std: float = 0.25


@dataclass
class EvalConfig:
    step_size: float = 2 / 255
    epsilon: float = 8 / 255
    random_init: bool = True
    lo: float = 0.0
    hi: float = 1.0
    eval_steps: List[int] = field(default_factory=lambda: [2, 7, 10, 20])

    def attack(self, steps: int = 7) -> AttackConfig:
        return AttackConfig(steps, self.step_size, self.epsilon, self.random_init, self.lo, self.hi)


@dataclass
class SweepConfig:
    sigmas: List[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    crossbar_size: int = 64
    attack_steps: Optional[int] = 10


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    supernet: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    crossbars: List[CrossbarSpec] = field(default_factory=lambda: [CrossbarSpec()])
    attack: EvalConfig = field(default_factory=EvalConfig)
    cost: CostModelConfig = field(default_factory=CostModelConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def spec_for(self, size: int) -> CrossbarSpec:
        for s in self.crossbars:
            if s.size == size:
                return s
        return dataclasses.replace(self.crossbars[0], size=size)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def identity(self) -> dict:
        """Everything that determines results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return d


_SECTIONS = {
    "data": DataConfig,
    "supernet": NetConfig,
    "train": TrainConfig,
    "attack": EvalConfig,
    "cost": CostModelConfig,
    "sweep": SweepConfig,
}
# train fields filled from the top-level seed and the data section
_RESERVED = {"train": {"seed", "validation_size"}}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_type(path: str, value: Any, tp) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(path, value, inner[0])
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin in (list, tuple, List, Tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
            return tuple(_check_type(f"{path}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
        elem = args[0] if args else Any
        return [_check_type(f"{path}[{i}]", v, elem) for i, v in enumerate(value)]
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        kt, vt = args
        return {_check_type(f"{path} key", k, kt): _check_type(f"{path}.{k}", v, vt) for k, v in value.items()}
    return value


def _build(cls, raw: Any, path: str, reserved=frozenset()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(reserved)
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {k: _check_type(f"{path}.{k}", v, hints[k]) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(raw: dict, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"seed", "output_dir", "crossbars", *_SECTIONS}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    top_seed = raw.get("seed", 0) if seed is None else seed
    top_seed = _check_type("seed", top_seed, int)
    out = _check_type("output_dir", raw.get("output_dir", "runs/default"), str)
    if output_dir is not None:
        out = output_dir
    sections = {name: _build(cls, raw.get(name), name, _RESERVED.get(name, ())) for name, cls in _SECTIONS.items()}
    sections["train"] = dataclasses.replace(sections["train"], seed=top_seed,
                                            validation_size=sections["data"].validation_size)
    xbars = raw.get("crossbars", [{}])
    if not isinstance(xbars, list) or not xbars:
        raise ConfigError("crossbars: expected a non-empty list")
    specs = [_build(CrossbarSpec, x, f"crossbars[{i}]") for i, x in enumerate(xbars)]
    if len({s.size for s in specs}) != len(specs):
        raise ConfigError("crossbars: duplicate crossbar sizes")
    for s in specs:
        for table in (sections["cost"].tile_area_mm2, sections["cost"].tile_energy_mJ,
                      sections["cost"].tile_latency_ms):
            if s.size not in table:
                raise ConfigError(f"cost: no per-tile constant for {s.size}x{s.size} crossbars")
    return RunConfig(seed=top_seed, output_dir=out, crossbars=specs, **sections)


def load_config(path, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(raw or {}, seed=seed, output_dir=output_dir)


# ---------------------------------------------------------------------------
# schema export
# ---------------------------------------------------------------------------

def _schema_for_type(tp) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        return {"anyOf": [_schema_for_type(inner[0]), {"type": "null"}]}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if origin in (list, tuple):
        s = {"type": "array"}
        if args and args[-1] is not Ellipsis:
            s["items"] = _schema_for_type(args[0])
            if origin is tuple:
                s["minItems"] = s["maxItems"] = len(args)
        return s
    if origin is dict:
        return {"type": "object", "additionalProperties": _schema_for_type(args[1])}
    if dataclasses.is_dataclass(tp):
        return _schema_for_dataclass(tp)
    return {}


def _schema_for_dataclass(cls, reserved=frozenset()) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        if f.name.startswith("_") or f.name in reserved:
            continue
        props[f.name] = _schema_for_type(hints[f.name])
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    props = {"seed": {"type": "integer"}, "output_dir": {"type": "string"},
             "crossbars": {"type": "array", "minItems": 1, "items": _schema_for_dataclass(CrossbarSpec)}}
    for name, cls in _SECTIONS.items():
        props[name] = _schema_for_dataclass(cls, _RESERVED.get(name, ()))
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "xbarnas run config",
            "type": "object", "properties": props, "additionalProperties": False}
