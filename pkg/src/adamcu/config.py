"""Run configuration and its line-based text format.

Every line of a config file is ``section.key = value``; ``#`` starts a
comment.  Tuples are comma-separated, booleans ``true``/``false``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .mcu import ContrastConfig
from .sampler import SamplerConfig
from .segnet import SegNetConfig
from .synthdata import DomainShift, SceneSpec, default_target_shift


@dataclass
class DataConfig:
    n_source: int = 200
    n_target: int = 100
    n_val: int = 50


@dataclass
class TrainConfig:
    epochs: int = 30
    pretrain_epochs: int = 4
    lr: float = 0.005
    pretrain_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    budget: float = 0.05
    gamma: float = 0.5
    source_per_iter: int = 2
    target_per_iter: int = 2
    active_sampling: bool = True
    mcu_image: bool = True
    mcu_domain: bool = True
    dccm: bool = True
    beta: float = 0.9
    eps_floor: float = 0.05
    aux_weight: float = 0.4
    contrast_weight: float = 1.0

    def validate(self):
        if self.mcu_domain and not self.mcu_image:
            raise ValueError("toggle lattice: mcu_domain requires mcu_image")
        if self.dccm and not self.mcu_domain:
            raise ValueError("toggle lattice: dccm requires mcu_domain")
        if not 0 <= self.budget <= 1:
            raise ValueError(f"budget must be in [0, 1], got {self.budget}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.source_per_iter < 1 or self.target_per_iter < 1:
            raise ValueError("need at least one source and one target image per iteration")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs/default"
    checkpoint: str = ""


def _default_net() -> SegNetConfig:
    return SegNetConfig()


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShift = field(default_factory=default_target_shift)
    data: DataConfig = field(default_factory=DataConfig)
    net: SegNetConfig = field(default_factory=_default_net)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        self.scene.validate()
        self.net.validate()
        self.sampler.validate()
        self.contrast.validate()
        self.train.validate()
        if self.net.num_classes != self.scene.num_classes:
            raise ValueError(
                f"net.num_classes={self.net.num_classes} differs from scene.num_classes={self.scene.num_classes}"
            )

    def copy(self) -> "RunConfig":
        return parse_config(format_config(self))


_SKIP = {("scene", "colors"), ("scene", "texture")}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text: str, like, where: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = [p for p in text.split(",") if p.strip()]
            if len(parts) != len(like):
                raise ValueError
            return tuple(_coerce(p, x, where) for p, x in zip(parts, like))
        return text
    except ValueError:
        raise ValueError(f"config {where}: cannot parse {text!r} as {type(like).__name__}") from None


def format_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for f in dataclasses.fields(cfg):
        if f.name == "seed":
            continue
        section = getattr(cfg, f.name)
        for sf in dataclasses.fields(section):
            if (f.name, sf.name) in _SKIP:
                continue
            lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"


def apply_setting(cfg: RunConfig, key: str, value: str) -> None:
    if key == "seed":
        cfg.seed = _coerce(value, 0, key)
        return
    section_name, _, name = key.partition(".")
    section = getattr(cfg, section_name, None)
    if section is None or not dataclasses.is_dataclass(section) or (section_name, name) in _SKIP \
            or name not in {f.name for f in dataclasses.fields(section)}:
        raise ValueError(f"config: unknown key {key!r}")
    setattr(section, name, _coerce(value, getattr(section, name), key))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'section.key = value', got {raw!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, key.strip(), value)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg))
