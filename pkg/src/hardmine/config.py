"""Run configuration: a JSON object with one section per component.

Every key is optional; missing keys take the defaults below, which are the
published hyperparameters (alpha 0.25, gamma 1.5, xi 30, B 0.35, thresholds
0.5). Unknown sections or keys are rejected with the offending key named.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from hardmine.data import GridSpec, SceneSpec
from hardmine.detector import DEFAULT_CHANNELS
from hardmine.errors import ConfigError
from hardmine.losses import LossConfig, Variant
from hardmine.train import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    conf_thr: float = 0.5
    iou_thr: float = 0.5
    min_conf: float = 0.001
    nms_iou: float = 0.5
    max_det: int = 10

    def __post_init__(self):
        for name in ("conf_thr", "iou_thr", "min_conf", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"eval.{name} must lie in [0, 1], got {v}")
        if self.max_det < 1:
            raise ConfigError("eval.max_det must be >= 1")


@dataclass(frozen=True)
class SplitConfig:
    train_frames: int = 512
    test_frames: int = 128

    def __post_init__(self):
        if self.train_frames < 1 or self.test_frames < 1:
            raise ConfigError("data.train_frames and data.test_frames must be >= 1")


@dataclass(frozen=True)
class TrainSection:
    lambda_box: float = 1.0
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    channels: tuple = DEFAULT_CHANNELS


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    scene: SceneSpec = field(default_factory=SceneSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: SplitConfig = field(default_factory=SplitConfig)

    def scene_for(self, split: str) -> SceneSpec:
        """Train frames use ``seed``; test frames use ``seed + 1``."""
        offset = {"train": 0, "test": 1}[split]
        return dataclasses.replace(self.scene, seed=self.seed + offset, image_size=self.grid.image_size)

    def train_config(self, variant: Optional[Variant] = None) -> TrainConfig:
        loss = self.loss if variant is None else self.loss.with_variant(variant)
        t = self.train
        return TrainConfig(loss, t.lambda_box, t.lr, t.epochs, t.batch_size, self.seed, tuple(t.channels))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["loss"]["variant"] = self.loss.variant.value
        for key in _RESERVED["scene"]:
            out["scene"].pop(key)
        for section in out.values():
            if isinstance(section, dict):
                for k, v in section.items():
                    if isinstance(v, tuple):
                        section[k] = list(v)
        return out


_SECTIONS = {
    "scene": SceneSpec,
    "grid": GridSpec,
    "loss": LossConfig,
    "train": TrainSection,
    "eval": EvalConfig,
    "data": SplitConfig,
}
# Derived from the top-level seed / grid, so not settable per section.
_RESERVED = {"scene": {"seed", "image_size"}}


def _coerce(cls, name, section: dict):
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in known or key in _RESERVED.get(name, ()):
            raise ConfigError(f"unknown key {name}.{key}")
        default = known[key].default
        if isinstance(default, bool) or key == "variant":
            pass
        elif isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{name}.{key} must be a list of integers")
            value = tuple(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number, got {value!r}")
            value = float(value)
        kwargs[key] = value
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None
    if isinstance(obj, SceneSpec):
        obj.validate()
    return obj


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"seed must be an integer, got {value!r}")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            kwargs[key] = _coerce(_SECTIONS[key], key, value)
        else:
            raise ConfigError(f"unknown key {key}")
    return RunConfig(**kwargs)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(raw)
