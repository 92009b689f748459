"""Flat ``key = value`` config files for training runs and synthetic scenes.

Lines are UTF-8; ``#`` starts a comment; blank lines are ignored. Tuples are
comma-separated, booleans are true/false. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .data import AugmentConfig, SynthSceneSpec
from .model import ModelConfig
from .objectives import ALPHA, BETA, GRAD_SPACINGS, SI_LAMBDA
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, BASE_LR, LR_POWER


class ConfigFileError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model
    block_channels: tuple = (16, 32, 64, 128, 256)
    convs_per_block: int = 2
    c_high: int = 64
    c_low: int = 32
    reduction: int = 16
    growth: int = 0
    bottleneck: int = 0
    head_channels: int = 0
    max_depth: float = 80.0
    # data: a directory in the rgb/ + depth/ layout, or synthetic scenes when empty
    data_dir: str = ""
    split: str = "train"
    synth_count: int = 16
    synth_seed: int = 0
    synth_height: int = 64
    synth_width: int = 128
    synth_min_objects: int = 2
    synth_max_objects: int = 5
    synth_min_depth: float = 3.0
    synth_max_depth: float = 60.0
    synth_invalid_fraction: float = 0.0
    # augmentation
    augment: bool = True
    rotation_deg: float = 2.5
    hflip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    color: float = 0.1
    crop_height: int = 64
    crop_width: int = 128
    # optimisation
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    lr: float = BASE_LR
    lr_power: float = LR_POWER
    lr_step: str = "iteration"  # or "epoch"
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    # loss
    si_lambda: float = SI_LAMBDA
    alpha: float = ALPHA
    beta: float = BETA
    spacings: tuple = GRAD_SPACINGS
    # run
    out_dir: str = "runs/default"
    precision: str = "float32"
    stop_after_steps: int = 0  # 0 runs to the end

    def __post_init__(self):
        if self.lr_step not in ("iteration", "epoch"):
            raise ConfigFileError(f"lr_step must be 'iteration' or 'epoch', got {self.lr_step!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigFileError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigFileError("epochs must be >= 0 and batch_size >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(block_channels=self.block_channels,
                           convs_per_block=self.convs_per_block, c_high=self.c_high,
                           c_low=self.c_low, reduction=self.reduction, growth=self.growth,
                           bottleneck=self.bottleneck, head_channels=self.head_channels,
                           max_depth=self.max_depth, seed=self.seed)

    def synth_spec(self) -> SynthSceneSpec:
        return SynthSceneSpec(seed=self.synth_seed, height=self.synth_height,
                              width=self.synth_width, min_objects=self.synth_min_objects,
                              max_objects=self.synth_max_objects,
                              min_depth=self.synth_min_depth, max_depth=self.synth_max_depth,
                              invalid_fraction=self.synth_invalid_fraction)

    def augment_config(self) -> AugmentConfig:
        if not self.augment:
            return AugmentConfig.identity(self.crop_height, self.crop_width)
        return AugmentConfig(self.rotation_deg, self.hflip_prob, self.brightness,
                             self.contrast, self.color, self.crop_height, self.crop_width)


def _convert(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
        return raw
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_text(text: str, cls=TrainConfig):
    hints = typing.get_type_hints(cls)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(raw, hints[key], key)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigFileError(str(exc)) from None


def load(path, cls=TrainConfig):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, cls)


def to_text(cfg) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
