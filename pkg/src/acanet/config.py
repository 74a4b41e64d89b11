"""Run configuration: an INI file with [model], [train], [data] and [eval] sections.

Every key maps onto a dataclass field; unknown sections or keys are rejected.
``section.key=value`` overrides are applied on top of the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .model import DESK_MODEL_CONFIG, ModelConfig
from .training import DESK_TRAIN_OPTIONS, PAPER_TRAIN_OPTIONS, TrainOptions

__all__ = [
    "CONFIG_DIR_ENV",
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "PRESETS",
    "RunConfig",
    "load_config",
    "resolve_config_path",
]

CONFIG_DIR_ENV = "ACANET_CONFIG_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str = ""
    dev_manifest: str = ""
    dev_trials: str = ""
    test_manifest: str = ""
    test_trials: str = ""


@dataclass(frozen=True)
class EvalConfig:
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0


_SECTIONS = {"model": ModelConfig, "train": TrainOptions, "data": DataConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in _SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


PRESETS = {
    "default": RunConfig(),
    "paper": RunConfig(train=PAPER_TRAIN_OPTIONS),
    "desk": RunConfig(model=DESK_MODEL_CONFIG, train=DESK_TRAIN_OPTIONS),
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse(raw: str, typ, where: str):
    raw = raw.strip()
    optional = False
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        optional = len(args) < len(typing.get_args(typ))
        typ = args[0]
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if typing.get_origin(typ) is tuple:
            item = typing.get_args(typ)[0]
            return tuple(item(p) for p in raw.split(",") if p.strip())
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def _apply(values: dict[str, dict[str, str]], base: RunConfig) -> RunConfig:
    out = {}
    for section, cls in _SECTIONS.items():
        types_ = _field_types(cls)
        changes = {}
        for key, raw in values.get(section, {}).items():
            if key not in types_:
                raise ConfigError(f"unknown key {section}.{key}")
            changes[key] = _parse(raw, types_[key], f"{section}.{key}")
        try:
            out[section] = dataclasses.replace(getattr(base, section), **changes)
        except ValueError as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from exc
    return RunConfig(**out)


def resolve_config_path(path) -> Path:
    """``path`` as given, else relative to ``$ACANET_CONFIG_DIR``."""
    p = Path(path)
    if p.exists():
        return p
    env = os.environ.get(CONFIG_DIR_ENV)
    if env and not p.is_absolute() and (Path(env) / p).exists():
        return Path(env) / p
    raise ConfigError(f"config file not found: {path}")


def load_config(path=None, overrides: Iterable[str] = (), preset: str = "default") -> RunConfig:
    """``preset`` supplies the values that neither the file nor the overrides set."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            cp.read_string(resolve_config_path(path).read_text(encoding="utf-8"))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            values[section] = dict(cp[section])
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}] in override {item!r}")
        values.setdefault(section, {})[name] = raw
    return _apply(values, PRESETS[preset])
