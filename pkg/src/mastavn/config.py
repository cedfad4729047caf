"""Experiment configuration: one YAML file per run, strictly validated."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import env as E
from .model import ModelConfig
from .training import EnvSpec, TrainConfig

OUTPUT_ENV_VAR = "MASTAVN_OUT"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _scene_ids(value):
    """Scene lists may be written as ``{start: a, stop: b}`` for ``range(a, b)``."""
    if isinstance(value, dict):
        if set(value) != {"start", "stop"}:
            raise ValueError("scene range needs exactly the keys 'start' and 'stop'")
        return list(range(int(value["start"]), int(value["stop"])))
    return value


class TrainSection(_Strict):
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    lr: float = Field(1e-4, gt=0.0)
    entropy_coef: float = Field(0.01, ge=0.0)
    entropy_final: float | None = Field(None, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    max_grad_norm: float = Field(0.5, ge=0.0)
    horizon: int = Field(128, ge=1)
    n_envs: int = Field(8, ge=1)
    total_env_steps: int = Field(100_000, ge=0)
    seed: int = 0
    probe_every: int = Field(0, ge=0)
    probe_episodes: int = Field(20, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    max_batch: int = Field(256, ge=0)

    def build(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class ModelSection(_Strict):
    n_agents: int = Field(2, ge=1)
    d_model: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1)
    n_encoder_layers: int = Field(2, ge=0)
    n_decoder_layers: int = Field(2, ge=0)
    mlp_ratio: int = Field(4, ge=1)
    skip_encoders: bool = False
    mlp_decoder: bool = False
    per_agent_params: bool = False

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class EnvSection(_Strict):
    height: int = Field(10, ge=5)
    width: int = Field(10, ge=5)
    wall_density: float = Field(0.2, ge=0.0, le=0.4)
    train_scenes: list[int] = Field(default_factory=lambda: list(range(100, 140)))
    probe_scenes: list[int] = Field(default_factory=lambda: list(range(900, 905)))
    max_steps: int = Field(E.MAX_STEPS, ge=1, le=E.MAX_STEPS)
    sounds: Literal["heard", "unheard", "both"] = "heard"

    _ranges = field_validator("train_scenes", "probe_scenes", mode="before")(_scene_ids)

    def build(self) -> EnvSpec:
        d = self.model_dump()
        d["train_scenes"] = tuple(d["train_scenes"])
        d["probe_scenes"] = tuple(d["probe_scenes"])
        return EnvSpec(**d)


class EvalSection(_Strict):
    scenes: list[int] = Field(default_factory=lambda: list(range(5000, 5020)))
    episodes_per_scene: int = Field(25, ge=1)
    seed: int = 12345
    split: Literal["heard", "unheard", "both"] = "both"
    greedy: bool = True

    _ranges = field_validator("scenes", mode="before")(_scene_ids)


class ExperimentConfig(_Strict):
    run_id: str = Field(min_length=1)
    output_dir: str | None = None
    train: TrainSection = TrainSection()
    model: ModelSection = ModelSection()
    env: EnvSection = EnvSection()
    eval: EvalSection = EvalSection()

    @property
    def run_dir(self) -> Path:
        root = self.output_dir or os.environ.get(OUTPUT_ENV_VAR, "runs")
        return Path(root) / self.run_id

    def with_updates(self, **sections) -> "ExperimentConfig":
        """Copy with nested overrides, e.g. ``with_updates(model={"mlp_decoder": True})``."""
        data = self.model_dump()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(), sort_keys=False)


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def loads_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "unknown position"
        raise ConfigError(f"{source}: YAML parse error at {where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: invalid config: {_describe(exc)}") from exc


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads_config(path.read_text(), str(path))


def write_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_yaml())
    return path
