"""YAML run configuration with strict keys, plus builders for the runtime configs."""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .core import KinematicLimits
from .crowd_sim import ScenarioConfig, SimConfig
from .eval import ExperimentConfig
from .orca import OrcaParams
from .planner import PlannerConfig
from .predictors import PredictorSpec, SamplerConfig
from .training import TrainingConfig
from .value_net import ValueNetConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SimSection:
    dt: float = 0.25
    time_limit: float = 25.0
    on_arrival: str = "stand"
    circle_radius: float = 4.0
    position_std: float = 0.5
    goal_std: float = 0.5
    vehicle_start_std: float = 0.5
    vehicle_radius: float = 0.3
    vehicle_v_pref: float = 1.0
    spawn_margin: float = 0.2
    visible: bool = False
    ped_radius_mean: float = 0.3
    ped_radius_std: float = 0.02
    ped_v_pref_mean: float = 1.0
    ped_v_pref_std: float = 0.1
    orca_time_horizon: float = 5.0
    orca_neighbor_dist: float = 10.0
    orca_max_neighbors: int = 10
    orca_safety_space: float = 0.02


@dataclass
class PredictorSection:
    kind: str = "multimodal"  # cvm | linear | multimodal | external
    horizon: int = 8
    num_samples: int = 20
    obs_len: int = 8
    heading_std: float = 0.25
    speed_std: float = 0.15
    repulsion: bool = False
    repulsion_radius: float = 0.6
    endpoint: str | None = None
    timeout: float = 2.0


@dataclass
class ValueNetSection:
    source: str = "params"  # params | analytic
    params: str | None = None
    embed_dims: list[int] = field(default_factory=lambda: [150, 100])
    feature_dims: list[int] = field(default_factory=lambda: [100, 50])
    attention_dims: list[int] = field(default_factory=lambda: [100, 100, 1])
    value_dims: list[int] = field(default_factory=lambda: [150, 100, 100, 1])


@dataclass
class PlannerSection:
    gamma: float = 0.9
    threshold: float = 0.1
    discomfort: float = 0.2
    aggregation: str = "mean"
    speed_samples: int = 5
    heading_samples: int = 16
    kce: bool = True
    eps_speed: float | None = None
    eps_heading_deg: float = 6.0
    n_expand: int = 2
    max_accel: float = 6.4
    max_turn_deg: float = 120.0


@dataclass
class TrainingSection:
    seed: int = 0
    n_pedestrians: int = 5
    il_episodes: int = 1000
    il_epochs: int = 50
    il_lr: float = 0.01
    demo_safety_space: float = 0.15
    rl_episodes: int = 3000
    rl_lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 100
    train_batches: int = 50
    capacity: int = 100_000
    target_update: int = 50
    eps_start: float = 0.5
    eps_end: float = 0.1
    eps_decay: int = 1000
    val_interval: int = 250
    val_cases: int = 100
    timeout_terminal: bool = True


@dataclass
class ExperimentSection:
    name: str = "experiment"
    n_pedestrians: int = 5
    num_cases: int = 100
    base_seed: int = 10_000
    mode: str = "replan"  # replan | open-loop-8
    policy: str = "planner"  # planner | orca | straight
    workers: int = 1


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    sim: SimSection = field(default_factory=SimSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    value_net: ValueNetSection = field(default_factory=ValueNetSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    # ---- serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        if "version" not in d:
            raise ConfigError("config is missing the required 'version' field")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d['version']!r}")
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        return cls.from_dict(data if data is not None else {})

    def with_overrides(self, seed: int | None = None, cases: int | None = None, params: str | None = None) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict())
        if seed is not None:
            cfg.training.seed = seed
            cfg.experiment.base_seed = seed
        if cases is not None:
            cfg.experiment.num_cases = cases
        if params is not None:
            cfg.value_net.params = params
            cfg.value_net.source = "params"
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.build_experiment()
            self.build_training()
            self.build_value_net()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.value_net.source not in ("params", "analytic"):
            raise ConfigError("value_net.source must be 'params' or 'analytic'")
        if self.experiment.workers < 1:
            raise ConfigError("experiment.workers must be >= 1")

    # ---- builders

    def build_sim(self) -> SimConfig:
        s = self.sim
        return SimConfig(s.dt, s.time_limit, self.predictor.obs_len, s.on_arrival)

    def build_scenario(self) -> ScenarioConfig:
        s = self.sim
        orca = OrcaParams(s.orca_time_horizon, s.orca_neighbor_dist, s.orca_max_neighbors, s.ped_v_pref_mean,
                          s.ped_v_pref_std, s.ped_radius_mean, s.ped_radius_std, s.orca_safety_space)
        return ScenarioConfig(s.circle_radius, s.position_std, s.goal_std, s.vehicle_start_std, s.vehicle_radius,
                              s.vehicle_v_pref, s.spawn_margin, 1000, s.visible, orca)

    def build_predictor(self) -> PredictorSpec:
        p = self.predictor
        sampler = SamplerConfig(p.heading_std, p.speed_std, p.repulsion, p.repulsion_radius)
        return PredictorSpec(p.kind, p.horizon, p.num_samples, p.obs_len, sampler, p.endpoint, p.timeout)

    def build_planner(self) -> PlannerConfig:
        p = self.planner
        limits = KinematicLimits.from_accel(p.max_accel, math.radians(p.max_turn_deg), self.sim.dt)
        return PlannerConfig(p.gamma, self.sim.dt, p.threshold, p.discomfort, p.aggregation, p.speed_samples,
                             p.heading_samples, p.kce, p.eps_speed, math.radians(p.eps_heading_deg), p.n_expand,
                             limits)

    def build_value_net(self) -> ValueNetConfig:
        v = self.value_net
        return ValueNetConfig(tuple(v.embed_dims), tuple(v.feature_dims), tuple(v.attention_dims), tuple(v.value_dims))

    def build_training(self) -> TrainingConfig:
        t = self.training
        return TrainingConfig(**{**asdict(t), "gamma": self.planner.gamma})

    def build_experiment(self) -> ExperimentConfig:
        e = self.experiment
        return ExperimentConfig(e.n_pedestrians, e.num_cases, e.base_seed, e.mode, e.policy, self.build_predictor(),
                                self.build_planner(), self.build_scenario(), self.build_sim(), e.name)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    for name in names & set(data):
        kwargs[name] = _coerce(hints[name], data[name], f"{where}.{name}".lstrip("."))
    return cls(**kwargs)


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        (item,) = typing.get_args(tp)
        return [_coerce(item, v, where) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value
