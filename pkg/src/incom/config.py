"""Experiment configuration: one file merging data, model, and train sections.

Files may be JSON or TOML. Unknown keys are rejected by name. Precedence is
CLI flag > INCOM_SEED env var > config file > built-in default. The top-level
seed fans out to the model, backbone, and train seeds unless the file pins
those explicitly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .data import GenConfig
from .model import ConfigError, ModelConfig
from .training import TrainConfig

SEED_ENV_VAR = "INCOM_SEED"


def _load_toml(path: str) -> dict:
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def load_config_file(path: str) -> dict:
    if str(path).endswith(".toml"):
        return _load_toml(path)
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def _gen_config_from_dict(obj: dict) -> GenConfig:
    known = {f.name for f in fields(GenConfig)}
    for key in obj:
        if key not in known:
            raise ConfigError(f"unknown data config key: {key!r}")
    return GenConfig(**obj)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        if self.model.num_verbs != self.data.num_verbs:
            raise ConfigError(
                f"model.num_verbs={self.model.num_verbs} != data.num_verbs={self.data.num_verbs}"
            )
        if self.model.backbone.num_classes != self.data.num_classes:
            raise ConfigError(
                f"model.backbone.num_classes={self.model.backbone.num_classes} != "
                f"data class vocabulary {self.data.num_classes}"
            )
        return self


def resolve_config(
    path: str | None = None,
    seed_override: int | None = None,
    env: dict | None = None,
) -> ExperimentConfig:
    """Build the experiment config with full precedence handling."""
    raw = load_config_file(path) if path else {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a table/object at top level")
    known = {"seed", "data", "model", "train"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key: {key!r}")

    seed = raw.get("seed", 0)
    env = os.environ if env is None else env
    if SEED_ENV_VAR in env:
        try:
            seed = int(env[SEED_ENV_VAR])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}") from e
    if seed_override is not None:
        seed = seed_override
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    model_raw = dict(raw.get("model", {}))
    backbone_raw = dict(model_raw.get("backbone", {}))
    model_raw.setdefault("seed", seed)
    backbone_raw.setdefault("seed", seed)
    model_raw["backbone"] = backbone_raw
    train_raw = dict(raw.get("train", {}))
    train_raw.setdefault("seed", seed)

    return ExperimentConfig(
        seed=seed,
        data=_gen_config_from_dict(dict(raw.get("data", {}))),
        model=ModelConfig.from_dict(model_raw),
        train=TrainConfig.from_dict(train_raw),
    ).validate()
