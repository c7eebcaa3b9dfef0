"""TOML run configuration: loading, validation, and resolved-copy writing."""
from __future__ import annotations

import dataclasses
import json
from typing import Any, Dict, Mapping, Optional

try:
    import tomllib as _toml
except ModuleNotFoundError:      # Python < 3.11
    import tomli as _toml

from .features import FeatureConfig
from .model import TopologyConfig
from .synth import SceneSpec
from .train import TrainConfig


def load_toml(path) -> Dict[str, Any]:
    with open(path, "rb") as f:
        return _toml.load(f)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def dump_toml(doc: Mapping[str, Any]) -> str:
    """Serialize a {section: {key: scalar/list}} mapping (plus top-level
    scalars) to TOML text. Covers what this package writes, nothing more."""
    lines = []
    tables = []
    for key, value in doc.items():
        if isinstance(value, Mapping):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_fmt_value(value)}")
    for name, table in tables:
        if lines and lines[-1] != "":
            lines.append("")
        lines.append(f"[{name}]")
        for key, value in table.items():
            lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def write_toml(doc: Mapping[str, Any], path) -> None:
    with open(path, "w") as f:
        f.write(dump_toml(doc))


def _from_section(cls, section: Optional[Mapping[str, Any]], what: str,
                  overrides: Optional[Mapping[str, Any]] = None):
    """Build a config dataclass from a TOML section plus explicit overrides,
    rejecting unknown keys so typos fail loudly."""
    fields = {f.name for f in dataclasses.fields(cls)}
    merged: Dict[str, Any] = {}
    for src in (section or {}), (overrides or {}):
        for key, value in src.items():
            if value is None:
                continue
            if key not in fields:
                raise ValueError(f"unknown {what} option {key!r} "
                                 f"(valid: {', '.join(sorted(fields))})")
            merged[key] = tuple(value) if isinstance(value, list) else value
    return cls(**merged)


def feature_config_from(doc: Mapping[str, Any], overrides=None) -> FeatureConfig:
    return _from_section(FeatureConfig, doc.get("features"), "features", overrides)


def topology_from(doc: Mapping[str, Any], overrides=None) -> TopologyConfig:
    return _from_section(TopologyConfig, doc.get("topology"), "topology", overrides)


def train_config_from(doc: Mapping[str, Any], overrides=None) -> TrainConfig:
    return _from_section(TrainConfig, doc.get("train"), "train", overrides)


def scene_spec_from(doc: Mapping[str, Any], overrides=None) -> SceneSpec:
    section = doc.get("scene")
    if section is None and not any(isinstance(v, Mapping) for v in doc.values()):
        section = doc    # a bare scene file without the [scene] header
    return _from_section(SceneSpec, section, "scene", overrides)


def as_section(cfg) -> Dict[str, Any]:
    """Dataclass -> plain dict with TOML-friendly values."""
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def resolved_doc(**sections) -> Dict[str, Any]:
    return {name: as_section(cfg) for name, cfg in sections.items() if cfg is not None}
