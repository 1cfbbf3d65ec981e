"""Hyperparameter containers and their INI-style persistence.

A config file has one section per module (``[data]``, ``[train]``, ``[masks]``,
``[eval]``). Values are parsed according to the dataclass field types; unknown
sections or keys are rejected so that a misspelled hyperparameter never passes
silently.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data_synth import DatasetSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    iterations: int = 1500
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    seed: int = 0
    # "intermediate" pairs SOURCE and TARGET each against INTERMEDIATE; "direct" pairs SOURCE with TARGET
    stage1_routing: str = "intermediate"
    checkpoint_every: int = 0
    snapshot_every: int = 0
    generator_filters: int = 8
    generator_res_blocks: int = 2
    generator_downsamplings: int = 2
    discriminator_filters: int = 16
    # split stage: two blocks give an 18 px receptive field on 32 px images
    discriminator_blocks: int = 2
    # attention stage judges the whole image; three blocks see 38 px
    attention_discriminator_blocks: int = 3
    # attention maps need finer resolution than translations: objects are only a few pixels wide
    attention_downsamplings: int = 1
    # attention head bias at initialization; sigmoid(-2) ~ 0.12 starts every pixel close to "keep the input"
    attention_init_bias: float = -2.0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.stage1_routing not in ("intermediate", "direct"):
            raise ConfigError(f"unknown stage1_routing {self.stage1_routing!r}")


@dataclass
class MaskDerivationConfig:
    threshold: float = 0.5
    dilation: int = 2
    min_area: int = 4

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("mask threshold must lie strictly inside (0, 1)")
        if self.dilation < 0 or self.min_area < 0:
            raise ConfigError("dilation and min_area must be >= 0")


@dataclass
class EvalConfig:
    attention_threshold: float = 0.5
    detector_iterations: int = 400
    detector_filters: int = 16
    detector_batch_size: int = 8
    detector_lr: float = 1e-3
    iou_threshold: float = 0.5
    min_object_size: int = 6
    n_eval: int = 200


@dataclass
class Config:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    masks: MaskDerivationConfig = field(default_factory=MaskDerivationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {"data": DatasetSpec, "train": TrainConfig, "masks": MaskDerivationConfig, "eval": EvalConfig}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, annotation: str, key: str):
    try:
        if annotation.startswith("tuple"):
            return tuple(float(v) for v in raw.split(","))
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        if annotation == "bool":
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {annotation}") from exc


def _section_from(parser: configparser.ConfigParser, name: str, cls):
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in parser.items(name):
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        kwargs[key] = _parse(raw, str(hints[key]), key)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def loads_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    cfg = Config()
    for name, cls in _SECTIONS.items():
        if parser.has_section(name):
            setattr(cfg, name, _section_from(parser, name, cls))
    return cfg


def load_config(path: str | Path) -> Config:
    return loads_config(Path(path).read_text())


def dumps_config(cfg: Config | None = None, **sections) -> str:
    cfg = cfg or Config()
    lines = []
    for name in _SECTIONS:
        section = sections.get(name, getattr(cfg, name))
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path: str | Path, cfg: Config | None = None, **sections) -> Path:
    path = Path(path)
    path.write_text(dumps_config(cfg, **sections))
    return path


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(dumps_config(cfg).encode()).hexdigest()


__all__ = [
    "Config", "ConfigError", "EvalConfig", "MaskDerivationConfig", "TrainConfig",
    "config_hash", "dumps_config", "load_config", "loads_config", "save_config",
]
