"""Experiment configuration: INI-style sections mapped onto the parameter dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .qkd.channel import ChannelParams
from .qkd.session import SessionParams
from .source_model import SourceParams
from .stream_analysis.timetags import DetectorParams
from .tomography import TomographySettings

CONFIG_DIR_ENV = "QDQKD_CONFIG_DIR"
DEFAULT_CONFIG = "paper-20K.cfg"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunOptions:
    seed: int = 1
    pulses: int = 1_000_000  # for the simulate command


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceParams = field(default_factory=SourceParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    tomography: TomographySettings = field(default_factory=TomographySettings)
    session: SessionParams = field(default_factory=SessionParams)
    run: RunOptions = field(default_factory=RunOptions)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}
_SKIP = {"tomography": {"bases"}}  # the 36 basis pairs are fixed


def _keys(section: str):
    obj = _SECTIONS[section]()
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if f.name not in _SKIP.get(section, ())}


def _parse_value(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            f = float(text)
            if f != int(f):
                raise ValueError(f"not an integer: {text!r}")
            return int(f)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def loads(text: str, source_name: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source_name)
    except configparser.Error as exc:
        raise ConfigError(f"{source_name}: {exc}") from None
    parts = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source_name}: unknown section [{section}]")
        allowed = _keys(section)
        values = {}
        for key, raw in cp.items(section):
            if key not in allowed:
                raise ConfigError(f"{source_name}: unknown key '{key}' in [{section}]")
            values[key] = _parse_value(raw, allowed[key], f"{source_name} [{section}] {key}")
        try:
            parts[section] = _SECTIONS[section]().__class__(**values)
        except ValueError as exc:
            raise ConfigError(f"{source_name} [{section}]: {exc}") from None
    return ExperimentConfig(**parts)


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for key in _keys(section):
            v = getattr(obj, key)
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Replace individual fields, e.g. ``with_overrides(cfg, session={"window_offset": 500.0})``."""
    parts = {name: dataclasses.replace(getattr(cfg, name), **vals) for name, vals in sections.items() if vals}
    return dataclasses.replace(cfg, **parts)


def shipped_config_names() -> list[str]:
    return sorted(p.name for p in resources.files("qdqkd.configs").iterdir() if p.name.endswith(".cfg"))


def resolve_config(name: str | None) -> tuple[str, str]:
    """Find a config by path, in the directory named by QDQKD_CONFIG_DIR, or among the shipped files.

    Returns (text, where).
    """
    name = name or DEFAULT_CONFIG
    p = Path(name)
    if p.is_file():
        return p.read_text(), str(p)
    env = os.environ.get(CONFIG_DIR_ENV)
    if env and (Path(env) / name).is_file():
        q = Path(env) / name
        return q.read_text(), str(q)
    res = resources.files("qdqkd.configs") / p.name
    if res.is_file():
        return res.read_text(), f"shipped:{p.name}"
    raise FileNotFoundError(f"config {name!r} not found (also looked in ${CONFIG_DIR_ENV} and shipped configs)")


def load(name: str | None = None) -> ExperimentConfig:
    text, where = resolve_config(name)
    return loads(text, where)
