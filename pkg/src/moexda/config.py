"""Experiment configuration: one JSON file, strict schema, dotted overrides."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ConfigDict, TypeAdapter, ValidationError

from .data import SyntheticSceneSpec
from .moments import MoExDAConfig
from .training import LossWeights, TrainConfig
from .vit import ViTConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "load_config",
    "apply_overrides",
    "config_to_dict",
    "SEED_ENV",
]

SEED_ENV = "MOEXDA_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    num_classes: int = 4
    texture_pool_size: int = 8
    frames_per_video: int = 16
    image_size: int = 32
    actor_size: tuple[int, int] = (4, 7)
    actor_speed: tuple[float, float] = (1.0, 2.5)
    texture_contrast: float = 0.0
    seed: int = 0
    num_train: int = 64
    rho_train: float = 0.9
    num_test: int = 64
    rho_test: float = 0.0

    @property
    def train_dir(self) -> Path:
        return Path(self.root) / "train"

    @property
    def test_dir(self) -> Path:
        return Path(self.root) / "test"

    def scene_spec(self, split: str) -> SyntheticSceneSpec:
        if split == "train":
            n, rho, seed = self.num_train, self.rho_train, self.seed
        elif split == "test":
            # Offset keeps test scenes distinct from training scenes.
            n, rho, seed = self.num_test, self.rho_test, self.seed + 1_000_003
        else:
            raise ValueError(f"unknown split {split!r}")
        return SyntheticSceneSpec(
            num_classes=self.num_classes,
            texture_pool_size=self.texture_pool_size,
            rho=rho,
            num_videos=n,
            frames_per_video=self.frames_per_video,
            image_size=self.image_size,
            actor_size=self.actor_size,
            actor_speed=self.actor_speed,
            texture_contrast=self.texture_contrast,
            seed=seed,
        )

    def __post_init__(self):
        # Surface scene-spec invariants at load time.
        self.scene_spec("train")
        self.scene_spec("test")


@dataclass
class EvalConfig:
    batch_size: int = 16
    report_path: str = "runs/report.json"
    log_path: str = "runs/predictions.csv"


@dataclass
class ExperimentConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    moex: MoExDAConfig = field(default_factory=MoExDAConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.moex.check_depth(self.vit.num_layers)
        if self.vit.num_classes != self.data.num_classes:
            raise ValueError(
                f"vit.num_classes ({self.vit.num_classes}) != data.num_classes ({self.data.num_classes})"
            )
        if self.vit.image_size != self.data.image_size:
            raise ValueError(
                f"vit.image_size ({self.vit.image_size}) != data.image_size ({self.data.image_size})"
            )

    def fingerprint(self) -> dict:
        return {
            "mode": self.moex.mode.value,
            "direction": self.moex.direction.value,
            "stop_gradient": self.moex.stop_gradient,
            "layers": list(self.moex.layers),
            "alpha_rgb": self.loss.alpha_rgb,
            "alpha_edge": self.loss.alpha_edge,
            "seed": self.train.seed,
        }


# The section types are plain dataclasses; reject unknown keys when validating.
for _cls in (ViTConfig, MoExDAConfig, TrainConfig, LossWeights, DataConfig, EvalConfig,
             ExperimentConfig):
    _cls.__pydantic_config__ = ConfigDict(extra="forbid")

_ADAPTER = TypeAdapter(ExperimentConfig)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``path=value`` assignments; values parse as JSON, else as strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r}: {key} is not a section")
        node[keys[-1]] = _parse_value(value)
    return raw


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return _ADAPTER.validate_python(raw)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _ADAPTER.dump_python(cfg, mode="json")


def load_config(
    path: Optional[str | Path] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    env: Optional[dict] = None,
) -> ExperimentConfig:
    """Load a config file, then ``--set`` overrides, then the seed overrides.

    ``MOEXDA_SEED`` (read from ``env``, default ``os.environ``) and then the
    explicit ``seed`` argument replace ``train.seed``.
    """
    raw: dict = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    apply_overrides(raw, overrides)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            raw.setdefault("train", {})["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    return config_from_dict(raw)
