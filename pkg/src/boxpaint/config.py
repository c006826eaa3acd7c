"""Run configuration: one JSON document with a full-default section per stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .codec import AnnotationStyle
from .denoiser import TrainConfig, UNetConfig
from .postproc import PostprocConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    image_size: int = 64
    num_classes: int = 5
    min_objects: int = 1
    max_objects: int = 6
    min_size: int = 12
    max_size: int = 30
    max_iou: float = 0.3
    shrunk_gap: int | None = None
    max_attempts: int = 100


@dataclass(frozen=True)
class CodecSection:
    shrink_ratio: float = 1 / 3
    dot_radius_px: int = 2
    dots: bool = True
    background: str = "image"


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 1000
    S: int = 50
    eta: float = 0.0
    multires_strength: float = 0.5


@dataclass(frozen=True)
class TrainSection:
    lr: float = 3e-5
    batch_size: int = 1
    steps: int = 1000
    flip_prob: float = 0.5
    prompt_y_prob: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    log_every: int = 1
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class EvalSection:
    # AP thresholds reported on top of the standard COCO sweep
    extra_ious: tuple[float, ...] = (0.9,)


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    model: UNetConfig = field(default_factory=UNetConfig)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def style(self) -> AnnotationStyle:
        c = self.codec
        return AnnotationStyle(
            shrink_ratio=c.shrink_ratio, dot_radius_px=c.dot_radius_px, dots=c.dots, background=c.background
        )

    def scene_spec(self):
        from .data import SceneSpec

        return SceneSpec(**dataclasses.asdict(self.data), shrink_ratio=self.codec.shrink_ratio, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **dataclasses.asdict(self.train),
            multires_strength=self.diffusion.multires_strength,
            seed=self.seed,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _build(cls, doc: Any, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    kwargs = {}
    for key, value in doc.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"seed must be an integer, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = _build(type(getattr(RunConfig(), key)), value, key)
    cfg = RunConfig(**kwargs)
    try:
        # sections are plain records; the derived objects own the range checks
        cfg.style(), cfg.scene_spec(), cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)
