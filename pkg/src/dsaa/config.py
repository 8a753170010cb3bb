"""Run configuration: one JSON document, every field defaulted."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .encoder import EncoderConfig
from .errors import ContractError
from .fgovd.world import GenConfig, WorldConfig
from .losses import LossWeights
from .text import ExtractionConfig
from .training import TrainConfig

ENV_OVERRIDES = {
    "DSAA_DATA_DIR": ("paths", "data_dir"),
    "DSAA_OUT_DIR": ("paths", "out_dir"),
    "DSAA_EXTRACT_ENDPOINT": ("extraction", "endpoint"),
}


@dataclass
class DsaaConfig:
    apa_bottleneck: int = 16
    mod_bottleneck: int = 16
    gamma_k: float = 0.1
    gamma_v: float = 0.1
    use_apa: bool = True
    use_modulator: bool = True
    modulate_prefixes: bool = False


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    workers: int = 1


@dataclass
class PathsConfig:
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"


@dataclass
class RunConfig:
    seed: int = 7
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    dsaa: DsaaConfig = field(default_factory=DsaaConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: GenConfig = field(default_factory=GenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    def digest(self) -> str:
        """sha256 of the resolved config; paths are excluded so relocating a run keeps its digest."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ContractError(f"config section {where or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ContractError(f"unknown config key(s) in {where or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _section_type(cls, name)
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip("."))
        elif name == "modulated_layers":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ContractError(f"bad config section {where or '<root>'}: {exc}") from exc


_SECTIONS = {
    "encoder": EncoderConfig,
    "world": WorldConfig,
    "dsaa": DsaaConfig,
    "losses": LossWeights,
    "training": TrainConfig,
    "data": GenConfig,
    "eval": EvalConfig,
    "extraction": ExtractionConfig,
    "paths": PathsConfig,
}


def _section_type(cls, name):
    return _SECTIONS.get(name) if cls is RunConfig else None


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Build a config from a (possibly partial) mapping; missing fields take defaults."""
    merged = RunConfig().to_dict()
    for key, value in data.items():
        if key in _SECTIONS and isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return _build(RunConfig, merged, "")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ContractError(f"override {key!r} does not name a config field")
        node[parts[-1]] = _parse_value(raw)
    return data


def load(path: str | Path | None = None, overrides: list[str] = (), environ: Mapping[str, str] | None = None) -> RunConfig:
    """Config file (optional), then environment path/endpoint overrides, then ``key=value`` flags."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ContractError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file {path} is not valid JSON: {exc}") from exc
    env = os.environ if environ is None else environ
    for var, (section, key) in ENV_OVERRIDES.items():
        if env.get(var):
            data.setdefault(section, {})[key] = env[var]
    return from_dict(apply_overrides(data, list(overrides)))
