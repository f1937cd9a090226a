"""YAML run configuration: one section per component, unknown keys rejected.

Grammar (every section and key optional; omitted values take defaults)::

    scenario: {seed, n_lanes, n_objects, kind_mix, fog_density, horizon, dt,
               behavior_mix, lead_probability, compliant, max_retries}
    train:    {max_epoch, max_traj, horizon, lr, grad_clip, seed, workers, wall_time}
    reward:   {beta, w_percp, match_threshold, gamma}
    vehicle:  {a_max, a_min, a_brake, v_lim, dt, tau, eps, r}
    noise:    {sigma_gap0, sigma_speed0, sigma_lane0, sigma_class0, miss0,
               fog_sigma_scale, fog_miss_scale, max_miss}
    model:    {hidden, n_slots, init_scale, pretrain_scenes, pretrain_steps,
               pretrain_lr, pretrain_seed}
    evaluate: {episodes, fog_levels, seed_base, models}
    simulate: {detector, episodes, fog}
    paths:    {checkpoint_in, out_dir, log_dir}
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .domain import VehicleParams
from .evaluation import EVAL_SEED_BASE, FOG_LEVELS
from .simulator import NoiseModel, ScenarioConfig
from .trainer import RewardConfig, TrainConfig

ENV_LOG_DIR = "RULEBOOK_RL_LOG_DIR"
ENV_WORKERS = "RULEBOOK_RL_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 0
    n_slots: int = 8
    init_scale: float = 0.0
    pretrain_scenes: int = 20
    pretrain_steps: int = 300
    pretrain_lr: float = 2.0
    pretrain_seed: int = 900_000

    def __post_init__(self):
        if self.hidden < 0 or self.n_slots < 1:
            raise ValueError("hidden must be >= 0 and n_slots >= 1")
        if self.pretrain_scenes < 0 or self.pretrain_steps < 0:
            raise ValueError("pretraining sizes must be >= 0")
        if self.init_scale < 0 or self.pretrain_lr <= 0:
            raise ValueError("init_scale must be >= 0 and pretrain_lr > 0")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    fog_levels: tuple[float, ...] = FOG_LEVELS
    seed_base: int = EVAL_SEED_BASE
    models: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fog_levels", tuple(float(f) for f in self.fog_levels))
        object.__setattr__(self, "models", {str(k): str(v) for k, v in self.models.items()})
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if any(not 0 <= f <= 100 for f in self.fog_levels):
            raise ValueError("fog levels must lie in [0, 100]")


DETECTORS = ("ground_truth", "blind", "argmax", "sample")


@dataclass(frozen=True)
class SimulateConfig:
    detector: str = "ground_truth"
    episodes: int = 1
    fog: float | None = None

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {', '.join(DETECTORS)}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass(frozen=True)
class Paths:
    checkpoint_in: str | None = None
    out_dir: str = "runs"
    log_dir: str | None = None


SECTIONS = {
    "scenario": ScenarioConfig,
    "train": TrainConfig,
    "reward": RewardConfig,
    "vehicle": VehicleParams,
    "noise": NoiseModel,
    "model": ModelConfig,
    "evaluate": EvalConfig,
    "simulate": SimulateConfig,
    "paths": Paths,
}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    train: TrainConfig = TrainConfig()
    reward: RewardConfig = RewardConfig()
    vehicle: VehicleParams = VehicleParams()
    noise: NoiseModel = NoiseModel()
    model: ModelConfig = ModelConfig()
    evaluate: EvalConfig = EvalConfig()
    simulate: SimulateConfig = SimulateConfig()
    paths: Paths = Paths()

    def __post_init__(self):
        if abs(self.scenario.dt - self.vehicle.dt) > 1e-12:
            raise ConfigError("scenario.dt and vehicle.dt must agree")

    @property
    def log_dir(self) -> Path:
        return Path(self.paths.log_dir or Path(self.paths.out_dir) / "logs")

    def to_dict(self) -> dict:
        return {name: _plain(getattr(self, name)) for name in SECTIONS}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _plain(section) -> dict:
    out = {}
    for f in fields(section):
        v = getattr(section, f.name)
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = dict(v)
        out[f.name] = v
    return out


def _build(name: str, cls, raw: Any):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{name}': {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown key '{key}'")
    parts = {name: _build(name, cls, raw.get(name)) for name, cls in SECTIONS.items()}
    try:
        return RunConfig(**parts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    raw = {k: dict(v or {}) for k, v in (raw or {}).items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        raw.setdefault(section, {})[name] = yaml.safe_load(value)
    return raw


def env_overrides(env=None) -> list[str]:
    env = os.environ if env is None else env
    out = []
    if env.get(ENV_LOG_DIR):
        out.append(f"paths.log_dir={env[ENV_LOG_DIR]}")
    if env.get(ENV_WORKERS):
        out.append(f"train.workers={env[ENV_WORKERS]}")
    return out


def load(path: str | Path | None, overrides: list[str] = (), env=None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    raw = apply_overrides(raw, [*env_overrides(env), *overrides])
    return from_dict(raw)


def replace_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section),
                                                                    **changes)})
