"""Scenario and trainer configuration, loaded from TOML."""

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Tuple

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .errors import DomainError

MB_BITS = 8.0e6
MHZ = 1.0e6


def _range(name, value, positive=True):
    lo, hi = value
    if lo > hi:
        raise DomainError(f"{name}: min {lo} exceeds max {hi}")
    if positive and lo <= 0:
        raise DomainError(f"{name}: values must be positive, got {value}")


@dataclass(frozen=True)
class ScenarioConfig:
    num_bs: int = 5
    num_uav: int = 1
    task_size_mb: Tuple[float, float] = (20.0, 40.0)
    bandwidth_mhz: Tuple[float, float] = (20.0, 60.0)
    compute_units: Tuple[float, float] = (0.2, 2.0)
    compute_unit_hz: float = 1.0e9
    gpu_per_bit: float = 0.5
    power_range: Tuple[float, float] = (1.0, 10.0)
    noise_power: float = 1.0
    channel_gain_range: Tuple[float, float] = (0.5, 1.0)
    accuracy_mean_range: Tuple[float, float] = (0.6, 0.9)
    accuracy_concentration: float = 20.0
    accuracy_clip: Tuple[float, float] = (0.05, 0.99)
    pixel_count: int = 1024
    beta: float = 2.0
    omega1: float = 1.0
    omega2: float = 1.0
    history_window: int = 10
    episode_length: int = 100
    action_space: int = 20
    zeta: float = 1.0
    bid_grid_points: int = 1000
    max_bs: int = 9
    seed: int = 0

    def __post_init__(self):
        for name in ("task_size_mb", "bandwidth_mhz", "compute_units", "power_range",
                     "channel_gain_range", "accuracy_mean_range", "accuracy_clip"):
            value = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            _range(name, value)
        if not 3 <= self.num_bs <= self.max_bs:
            raise DomainError(f"num_bs must lie in [3, {self.max_bs}], got {self.num_bs}")
        if self.num_uav != 1:
            raise DomainError("exactly one UAV is supported")
        if not (0 < self.accuracy_mean_range[0] and self.accuracy_mean_range[1] < 1):
            raise DomainError("accuracy means must lie in (0, 1)")
        if self.accuracy_clip[1] >= 1:
            raise DomainError("accuracy clip must stay below 1")
        for name in ("compute_unit_hz", "gpu_per_bit", "noise_power", "accuracy_concentration",
                     "beta", "omega1", "omega2", "zeta"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        for name in ("pixel_count", "history_window", "episode_length", "action_space",
                     "bid_grid_points"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")

    @property
    def num_providers(self):
        return self.num_bs + 1

    @property
    def max_providers(self):
        return self.max_bs + 1

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainerConfig:
    episodes: int = 500
    diffusion_steps: int = 5
    eta_min: float = 1e-4
    eta_max: float = 2e-2
    soft_update: float = 0.005
    gamma: float = 0.95
    batch_size: int = 128
    temperature: float = 0.05
    learning_rate: float = 1e-4
    critic_learning_rate: float = 1e-4
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "relu"
    buffer_capacity: int = 100_000
    warmup: int = 1000
    reward_scale: float = 0.0
    log_every: int = 500
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 < self.soft_update <= 1:
            raise DomainError("soft_update must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise DomainError("gamma must lie in [0, 1)")
        for name in ("episodes", "diffusion_steps", "batch_size", "buffer_capacity", "log_every"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if not 0 < self.eta_min <= self.eta_max < 1:
            raise DomainError("noise schedule must satisfy 0 < eta_min <= eta_max < 1")
        if self.temperature < 0 or self.learning_rate <= 0 or self.critic_learning_rate <= 0:
            raise DomainError("temperature must be >= 0 and learning rates positive")
        if self.warmup < 0 or self.reward_scale < 0:
            raise DomainError("warmup and reward_scale must be non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _coerce(cls, table):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise DomainError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for key, value in table.items():
        out[key] = tuple(value) if isinstance(value, list) else value
    return cls(**out)


def default_document():
    text = resources.files("dmsb").joinpath("defaults.toml").read_text()
    return tomllib.loads(text)


def scenario_from_dict(table):
    return _coerce(ScenarioConfig, table)


def trainer_from_dict(table):
    return _coerce(TrainerConfig, table)


def load_toml(path):
    with Path(path).open("rb") as fh:
        return tomllib.load(fh)


def load_scenario(path):
    doc = load_toml(path)
    return scenario_from_dict(doc.get("scenario", doc))
