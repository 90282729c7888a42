"""YAML run configuration: model, training, loss and augmentation sections."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data.augment import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = ("seed", "model", "train", "loss", "augment")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            self.model.replace(seed=seed),
            TrainConfig(**{**self.train.to_dict(), "seed": seed}),
            self.loss,
            self.augment,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "augment": self.augment.to_dict(),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls(
                ModelConfig.from_dict(d.get("model") or {}),
                TrainConfig.from_dict(d.get("train") or {}),
                LossConfig.from_dict(d.get("loss") or {}),
                AugmentConfig(**(d.get("augment") or {})),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config entry: {exc}") from exc
        if "seed" in d:
            cfg = cfg.with_seed(int(d["seed"]))
        return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return RunConfig.from_dict(data)
