"""Run configuration: a strictly validated TOML-subset key-value file.

Unknown sections or keys are hard errors; silent hyperparameter typos are the
fastest way to waste an RL run. Defaults follow the reference hyperparameter
table where one exists (gamma 0.99, GAE/TD lambda 0.95, clip 0.2, rollout
horizon 16, RL lr 5e-5; NCSN batch 128, sigma 20 -> 0.01 over 50 levels,
EMA 0.999, energy lr 1e-5; AMP gradient penalty 5, output reg 0.05), with
desk-scale substitutes (64 envs, minibatch 256) where the reference values
assume thousands of GPU-parallel environments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .amp_baseline import AmpConfig
from .energy import EnergyTrainConfig
from .maze_env import MazeWorld
from .rl import PpoConfig
from .training import NearTrainConfig


class ConfigError(Exception):
    pass


@dataclass
class WorldConfig:
    start_window: list = field(default_factory=lambda: [1.0, 2.0, 8.5, 9.5])
    goal: list = field(default_factory=lambda: [9.0, 1.5])
    goal_threshold: float = 0.3
    max_speed: float = 0.5
    horizon: int = 300
    expert_noise: float = 0.05

    def build(self) -> MazeWorld:
        x0, x1, y0, y1 = self.start_window
        return MazeWorld(
            start_window=((x0, x1), (y0, y1)),
            goal=tuple(self.goal),
            goal_threshold=self.goal_threshold,
            max_speed=self.max_speed,
            horizon=self.horizon,
            expert_noise=self.expert_noise,
        )


@dataclass
class ScaleConfig:
    sigma_max: float = 20.0
    sigma_min: float = 0.01
    levels: int = 50


@dataclass
class ExpertConfig:
    episodes: int = 200


@dataclass
class EvalConfig:
    episodes: int = 100
    top_k: int = 20
    horizon: int = 300


@dataclass
class ProbeConfig:
    sigma: float = 20.0
    lattice: int = 100
    radii: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0])
    iterations: int = 200
    n_rollouts: int = 20
    n_samples: int = 2000
    fixed_state: list = field(default_factory=lambda: [1.5, 9.0])
    density_bins: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    energy: EnergyTrainConfig = field(default_factory=EnergyTrainConfig)
    rl: PpoConfig = field(default_factory=PpoConfig)
    near: NearTrainConfig = field(default_factory=NearTrainConfig)
    amp: AmpConfig = field(default_factory=AmpConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


_SECTIONS = {
    "world": WorldConfig,
    "expert": ExpertConfig,
    "scale": ScaleConfig,
    "energy": EnergyTrainConfig,
    "rl": PpoConfig,
    "near": NearTrainConfig,
    "amp": AmpConfig,
    "eval": EvalConfig,
    "probe": ProbeConfig,
}


def _fill(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    return cls(**values)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    cfg = RunConfig()
    if "seed" in data:
        seed = data.pop("seed")
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        cfg.seed = seed
    for section, values in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a section")
        setattr(cfg, section, _fill(_SECTIONS[section], section, values))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(str(exc)) from None
    return config_from_dict(data)
