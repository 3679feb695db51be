"""Run configuration: one nested document covering every tunable default.

Unknown keys are rejected, every defaulted value is echoed into the
resolved dump, and the config hash is a digest of the canonicalized
content, so a resolved dump re-fed as input hashes identically.
Environment variables with the ``COORDGAN_`` prefix override single keys,
e.g. ``COORDGAN_TRAIN__BATCH_SIZE=8`` (double underscore per nesting
level).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import yaml

from .data import SyntheticShapeSpec
from .gan import TrainConfig
from .hypernet import GeneratorConfig
from .inr import ArchConfig

ENV_PREFIX = "COORDGAN_"


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a directory path
    count: int = 5000
    hflip: bool = True
    synthetic: SyntheticShapeSpec = field(
        default_factory=lambda: SyntheticShapeSpec(min_shapes=1, max_shapes=1)
    )


@dataclass(frozen=True)
class EvalConfig:
    eval_seed: int = 0
    extractor_seed: int = 0
    fid_samples: int = 256
    superres_factor: int = 2
    kpl_n_train: int = 1000
    kpl_n_test: int = 256
    kpl_space: str = "Z"
    projection_steps: int = 200
    projection_lr: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(value, target_type, path: str):
    origin = typing.get_origin(target_type)
    if dataclasses.is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build(target_type, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(target_type)
        elem = args[0] if args else float
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {target_type}")


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(
            f"unknown config key{'s' if len(unknown) > 1 else ''} "
            f"{', '.join(sorted((path + '.' if path else '') + k for k in unknown))}"
        )
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _apply_env_overrides(data: dict, env: dict) -> dict:
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"environment override {key} is not valid YAML: {exc}")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key} conflicts with scalar key")
        node[parts[-1]] = value
    return data


def _validate_consistency(cfg: RunConfig) -> RunConfig:
    if cfg.arch.resolution != cfg.train.resolution:
        raise ConfigError(
            f"arch.block_resolutions ends at {cfg.arch.resolution} but "
            f"train.resolution is {cfg.train.resolution}"
        )
    if cfg.data.source == "synthetic" and cfg.data.synthetic.resolution != cfg.train.resolution:
        raise ConfigError(
            f"data.synthetic.resolution {cfg.data.synthetic.resolution} != "
            f"train.resolution {cfg.train.resolution}"
        )
    if cfg.eval.kpl_space not in ("Z", "W"):
        raise ConfigError(f"eval.kpl_space must be Z or W, got {cfg.eval.kpl_space!r}")
    return cfg


def load_config(
    path=None, *, env: dict | None = None, overrides: dict | None = None
) -> RunConfig:
    """Load, override, validate and resolve a run configuration.

    ``path`` may be None (all defaults). Environment overrides are read from
    ``env`` (default: os.environ); ``overrides`` is a nested dict applied on
    top of the file (used by CLI flags).
    """
    data: dict = {}
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
        data = loaded
    data = _apply_env_overrides(data, os.environ if env is None else env)
    if overrides:
        def _merge(dst: dict, src: dict):
            for k, v in src.items():
                if isinstance(v, dict) and isinstance(dst.get(k), dict):
                    _merge(dst[k], v)
                else:
                    dst[k] = v
        _merge(data, overrides)
    cfg = _build(RunConfig, data)
    return _validate_consistency(cfg)


def dump_resolved(cfg: RunConfig, path) -> str:
    """Write the fully resolved config (every default echoed) as YAML."""
    digest = config_hash(cfg)
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    with open(path, "w") as f:
        f.write(f"# config_hash: {digest}\n")
        f.write(text)
    return digest
