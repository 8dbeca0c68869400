"""Run configuration: TOML file plus flag overrides, with every field defaulted."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..networks import ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Unknown key or badly typed value; the CLI maps it to a usage error."""


@dataclass(frozen=True)
class ScheduleConfig:
    train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class SamplerSection:
    kind: str = "ddim"
    steps: int = 50
    guidance: float = 7.5


@dataclass(frozen=True)
class DataConfig:
    base_styles: tuple[str, ...] = ("arch", "truss", "suspension")
    base_count: int = 200
    style: str = "coral"
    style_count: int = 20
    style_seed: int = 100


@dataclass(frozen=True)
class PretrainConfig:
    vae_steps: int = 800
    vae_lr: float = 1e-3
    vae_batch: int = 16
    kl_weight: float = 1e-4
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 16
    uncond_prob: float = 0.1


@dataclass(frozen=True)
class TiConfig:
    placeholder: str = "<the core bridge>"
    init_word: str = "bridge"
    steps: int = 500
    lr: float = 5e-3
    batch: int = 8


@dataclass(frozen=True)
class DreamboothConfig:
    instance_token: str = "beike"
    class_token: str = "bridge"
    class_per_instance: int = 5
    prior_weight: float = 1.0
    train_text_encoder: bool = False
    steps: int = 400
    lr: float = 1e-5
    batch: int = 4


@dataclass(frozen=True)
class HypernetConfig:
    name: str = "coral_shell_bridge"
    multipliers: tuple[int, ...] = (1, 2, 1)
    activation: str = "linear"
    init: str = "normal"
    steps: int = 300
    lr: float = 5e-4
    batch: int = 8


@dataclass(frozen=True)
class LoraConfig:
    name: str = "aki"
    rank: int = 4
    alpha: float | None = None
    steps: int = 300
    lr: float = 1e-4
    batch: int = 8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ti: TiConfig = field(default_factory=TiConfig)
    dreambooth: DreamboothConfig = field(default_factory=DreamboothConfig)
    hypernet: HypernetConfig = field(default_factory=HypernetConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return _build(cls, d, "")

    def override(self, dotted: dict[str, Any]) -> RunConfig:
        """Copy with ``{"section.key": value}`` replacements (None values ignored)."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            node = d
            *path, leaf = key.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, default, where: str):
    if value is None and default is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) or (default is None and isinstance(value, (int, float))):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(_coerce(v, default[0], where) for v in value) if default else tuple(value)
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def _build(cls, d, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {[prefix + k for k in unknown]}")
    defaults = cls()
    kwargs = {}
    for name, value in d.items():
        default = getattr(defaults, name)
        where = prefix + name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where + ".")
        else:
            kwargs[name] = _coerce(value, default, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = RunConfig.from_dict(data)
    return cfg.override(overrides or {})
