"""
Run configuration: the TrainConfig model, the flat key=value config file and
the named algorithm presets.
"""
from __future__ import annotations

import os
from typing import Dict, List, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from mh_losses import HyperParams


class ConfigError(ValueError):
    """Config file or overrides do not describe a valid run."""


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    backend: Literal["maddpg", "matd3"] = "maddpg"
    mutual_help: bool = True
    selectivity: bool = True
    marl_term: bool = True
    reward_scheme: Literal["local", "global_sum"] = "local"

    gamma: float = Field(0.95, ge=0.0, lt=1.0)
    tau: float = Field(0.01, ge=0.0, le=1.0)
    eta: float = Field(0.05, gt=0.0)
    beta: float = Field(2.0, gt=0.0)
    batch_size: int = Field(64, ge=1)
    lr_actor: float = Field(1e-3, gt=0.0)
    lr_critic: float = Field(1e-3, gt=0.0)
    lr_expected: float = Field(1e-3, gt=0.0)

    noise_start: float = Field(0.1, ge=0.0)
    noise_end: float = Field(0.01, ge=0.0)
    warmup: int = Field(1000, ge=1)
    total_steps: int = Field(100_000, ge=1)
    eval_every: int = Field(5_000, ge=1)
    eval_episodes: int = Field(10, ge=1)

    seed: int = Field(0, ge=0)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    env: Literal["flocking", "coordination"] = "flocking"
    n_agents: int = Field(3, ge=2)

    hidden_sizes: Tuple[int, ...] = (64, 64)
    buffer_capacity: int = Field(50_000, ge=1)
    policy_delay: int = Field(2, ge=1)
    target_noise: float = Field(0.2, ge=0.0)
    target_noise_clip: float = Field(0.5, ge=0.0)
    name: Optional[str] = None

    @field_validator("seeds", "hidden_sizes", mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_widths(cls, value):
        if not value or any(width < 1 for width in value):
            raise ValueError("hidden_sizes needs at least one positive width")
        return value

    @field_validator("seeds")
    @classmethod
    def _non_negative_seeds(cls, value):
        if not value or any(seed < 0 for seed in value):
            raise ValueError("seeds must be a non-empty list of non-negative integers")
        return value

    @model_validator(mode="after")
    def _ablation_legality(self):
        if not self.marl_term and not self.mutual_help:
            raise ValueError("marl_term=false ('no MARL') requires mutual_help=true")
        if self.env == "coordination" and self.n_agents != 2:
            raise ValueError("the coordination game has exactly two agents")
        return self

    @property
    def algorithm(self) -> str:
        """Label used in metrics and output directories."""
        if self.name:
            return self.name
        label = self.backend.upper()
        if self.mutual_help:
            label = f"MH-{label}"
            if not self.selectivity:
                label += "-no-selectivity"
            if not self.marl_term:
                label += "-no-MARL"
        if self.reward_scheme == "global_sum":
            label += "-GR"
        return label

    def hyper_params(self) -> HyperParams:
        return HyperParams(self.gamma, self.tau, self.eta, self.beta, self.batch_size,
                           self.lr_actor, self.lr_critic, self.lr_expected)

    def for_seed(self, seed: int) -> "TrainConfig":
        return self.with_overrides({"seed": seed})

    def with_overrides(self, overrides: Mapping[str, object]) -> "TrainConfig":
        return build_config({**self.model_dump(), **overrides})


ALGORITHM_PRESETS: Dict[str, Dict[str, object]] = {
    "MADDPG": {"backend": "maddpg", "mutual_help": False},
    "MH-MADDPG": {"backend": "maddpg", "mutual_help": True},
    "MADDPG-GR": {"backend": "maddpg", "mutual_help": False, "reward_scheme": "global_sum"},
    "MH-MADDPG-no-selectivity": {"backend": "maddpg", "mutual_help": True, "selectivity": False},
    "MH-MADDPG-no-MARL": {"backend": "maddpg", "mutual_help": True, "marl_term": False},
    "MATD3": {"backend": "matd3", "mutual_help": False},
    "MH-MATD3": {"backend": "matd3", "mutual_help": True},
    "MATD3-GR": {"backend": "matd3", "mutual_help": False, "reward_scheme": "global_sum"},
}


def build_config(values: Mapping[str, object]) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as exc:
        keys = sorted({".".join(str(p) for p in err["loc"]) or "config" for err in exc.errors()})
        raise ConfigError(f"invalid config ({', '.join(keys)}): {exc}") from exc


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> TrainConfig:
    """Read a key=value file (keys are TrainConfig fields); overrides win."""
    values: Dict[str, object] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None or value == "":
                raise ConfigError(f"config key {key!r} in {path} has no value")
            values[key] = value
    values.update(overrides or {})
    return build_config(values)


def preset(algorithm: str, base: TrainConfig) -> TrainConfig:
    settings = ALGORITHM_PRESETS.get(algorithm)
    if settings is None:
        raise ConfigError(f"unknown algorithm {algorithm!r}; known: {', '.join(ALGORITHM_PRESETS)}")
    # presets reset every switch so a base config cannot leak an ablation into them
    switches = {"mutual_help": True, "selectivity": True, "marl_term": True,
                "reward_scheme": "local", "name": None}
    return base.with_overrides({**switches, **settings})


def suite_configs(base: TrainConfig, algorithms: List[str], seeds: Optional[List[int]] = None) -> List[TrainConfig]:
    """One config per (algorithm, seed), algorithms outermost."""
    seeds = list(seeds) if seeds else list(base.seeds)
    return [preset(algorithm, base).for_seed(seed) for algorithm in algorithms for seed in seeds]


def parse_overrides(pairs: List[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(config: TrainConfig, path: str):
    lines = [f"{key}={_format_value(value)}" for key, value in config.model_dump().items() if value is not None]
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp_path, path)
