"""Experiment configuration files (YAML) for training runs and synthetic corpora."""
import hashlib
import json
from pathlib import Path
from typing import Literal, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.utils.errors import ConfigError

Variant = Literal["full", "no_equivariance", "no_context"]

M = TypeVar("M", bound=BaseModel)


class RunConfig(BaseModel):
    """Hyperparameters of one model; serialized into every checkpoint and report."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    # model
    hidden_dim: int = Field(default=128, ge=2)
    channels: int = Field(default=64, ge=2)
    layers: int = Field(default=4, ge=1)
    gat_heads: int = Field(default=4, ge=1)
    attention_heads: int = Field(default=1, ge=1)
    history_channels: int = Field(default=4, ge=0)
    variant: Variant = "full"

    # diffusion
    diffusion_steps: int = Field(default=200, ge=2)
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=5e-2, gt=0, lt=1)

    # optimization
    learning_rate: float = Field(default=2e-4, gt=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    ema_decay: float = Field(default=0.999, ge=0, le=1)
    batch_size: int = Field(default=32, ge=1)
    train_steps: int = Field(default=2000, ge=0)
    seed: int = Field(default=0, ge=0)

    # data
    radius_m: float = Field(default=50.0, gt=0)
    history_frames: int = Field(default=15, ge=2)
    future_frames: int = Field(default=25, ge=1)
    downsample_factor: int = Field(default=2, ge=1)
    window_stride: int = Field(default=5, ge=1)
    frame_rate_hz: float = Field(default=5.0, gt=0)

    @model_validator(mode="after")
    def _consistent(self):
        problems = []
        if self.beta_start > self.beta_end:
            problems.append(f"beta_start {self.beta_start} exceeds beta_end {self.beta_end}")
        if self.hidden_dim % 2:
            problems.append(f"hidden_dim must be even, got {self.hidden_dim}")
        if self.channels % 2 or self.channels % self.attention_heads:
            problems.append(f"channels {self.channels} must be even and divisible by attention_heads {self.attention_heads}")
        if self.history_channels > self.history_frames - 1:
            problems.append(f"history_channels {self.history_channels} exceeds the {self.history_frames - 1} observed velocities")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def horizon_frames(self):
        """Future frame numbers (1-based) at whole seconds: 5, 10, ... at 5 Hz."""
        step = int(round(self.frame_rate_hz))
        return list(range(step, self.future_frames + 1, step))


class SynthConfig(BaseModel):
    """Parameters of the synthetic highway corpus."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    scenes_per_class: int = Field(default=200, ge=0)
    speed_min: float = Field(default=8.0, gt=0)
    speed_max: float = Field(default=16.0, gt=0)
    turn_rate: float = Field(default=0.15, ge=0)
    noise_sigma: float = Field(default=0.05, ge=0)
    neighbors_mean: float = Field(default=2.0, ge=0)
    lane_width: float = Field(default=3.7, gt=0)
    lane_change_duration: float = Field(default=3.0, gt=0)
    leader_gap_min: float = Field(default=20.0, gt=0)
    leader_gap_max: float = Field(default=35.0, gt=0)
    raw_rate_hz: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def _ranges(self):
        if self.speed_min > self.speed_max:
            raise ValueError(f"speed_min {self.speed_min} exceeds speed_max {self.speed_max}")
        if self.leader_gap_min > self.leader_gap_max:
            raise ValueError(f"leader_gap_min {self.leader_gap_min} exceeds leader_gap_max {self.leader_gap_max}")
        return self


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def parse_config(model: Type[M], data: Union[dict, None], source: str = "config") -> M:
    try:
        return model.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e)}")


def load_config(model: Type[M], path: Union[str, Path, None]) -> M:
    """Read a YAML mapping into ``model``; a missing path gives the defaults."""
    if path is None:
        return model()
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML in {path}: {e}")
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(model, data, str(path))


def load_run_config(path: Union[str, Path, None]) -> RunConfig:
    return load_config(RunConfig, path)


def load_synth_config(path: Union[str, Path, None]) -> SynthConfig:
    return load_config(SynthConfig, path)
