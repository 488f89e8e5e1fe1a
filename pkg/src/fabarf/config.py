"""Experiment configuration: dataclass schema, YAML files and dotted overrides."""
from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .optim import TrainConfig
from .scene import DEFAULT_BLOBS


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-5``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _default_blobs():
    return [{"center": list(b.center), "scales": list(b.scales), "peak": b.peak, "color": list(b.color)}
            for b in DEFAULT_BLOBS]


@dataclass
class BlobConfig:
    center: tuple = (0.0, 0.0, 0.0)
    scales: tuple = (0.3, 0.3, 0.3)
    peak: float = 30.0
    color: tuple = (0.5, 0.5, 0.5)


@dataclass
class SceneConfig:
    blobs: list = field(default_factory=_default_blobs)
    near: float = 2.0
    far: float = 6.0
    image_size: int = 64
    n_train: int = 16
    n_test: int = 4
    radius: float = 4.0
    elevation: tuple = (-10.0, 50.0)
    samples_per_ray: int = 512
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)


@dataclass
class PerturbConfig:
    rot_std_deg: float = 5.0
    trans_std: float = 0.1
    seed: int = 1
    side: str = "left"


@dataclass
class EvalConfig:
    refine_steps: int = 100
    refine_lr: float = 1e-3


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _check_value(value, tp, where):
    origin = typing.get_origin(tp)
    if tp is Any:
        return value
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(cls, data: Optional[dict], where: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = f"{where}{name}"
        if dataclasses.is_dataclass(tp):
            kwargs[name] = from_dict(tp, value, key + ".")
        else:
            kwargs[name] = _check_value(value, tp, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {exc}") from exc


def to_dict(cfg) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(dataclasses.asdict(cfg))


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings (values parsed as YAML scalars/lists)."""
    data = {k: v for k, v in data.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node[p] = dict(child)
            node = node[p]
        try:
            node[parts[-1]] = parse_yaml(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {key!r}: cannot parse value {raw!r}") from exc
    return data


def load_config(path=None, overrides=()) -> Config:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        data = parse_yaml(p.read_text()) or {}
    data = apply_overrides(data, overrides)
    cfg = from_dict(Config, data)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    for i, b in enumerate(cfg.scene.blobs):
        where = f"scene.blobs[{i}]"
        blob = from_dict(BlobConfig, b, where + ".")
        if len(blob.scales) != 3 or any(float(s) <= 0 for s in blob.scales):
            raise ConfigError(f"{where}.scales: every scale must be > 0, got {list(blob.scales)}")
        if float(blob.peak) <= 0:
            raise ConfigError(f"{where}.peak: must be > 0, got {blob.peak}")
        if len(blob.center) != 3 or len(blob.color) != 3:
            raise ConfigError(f"{where}: center and color need 3 entries")
    if not 0 < cfg.scene.near < cfg.scene.far:
        raise ConfigError("scene.near/scene.far: need 0 < near < far")
    if cfg.scene.image_size < 11:
        raise ConfigError("scene.image_size: must be at least 11 pixels")
    if cfg.scene.n_train < 3:
        raise ConfigError("scene.n_train: need at least 3 training views")
    if cfg.perturb.rot_std_deg < 0 or cfg.perturb.trans_std < 0:
        raise ConfigError("perturb: standard deviations must be nonnegative")


def save_config(cfg: Config, path) -> Path:
    p = Path(path)
    p.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return p
