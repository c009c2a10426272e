"""Circle-crossing crowd simulation with ORCA pedestrians and a holonomic vehicle."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Action, JointState, PedestrianState, VehicleState, min_separation_batch, propagate
from .orca import OrcaParams, OrcaResult, orca_velocities, preferred_velocity
from .predictors import ObservedTracks


class ScenarioError(RuntimeError):
    pass


class EpisodeTerminated(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    circle_radius: float = 4.0
    position_std: float = 0.5
    goal_std: float = 0.5
    vehicle_start_std: float = 0.5
    vehicle_radius: float = 0.3
    vehicle_v_pref: float = 1.0
    spawn_margin: float = 0.2
    max_attempts: int = 1000
    visible: bool = False
    orca: OrcaParams = field(default_factory=OrcaParams)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.25
    time_limit: float = 25.0
    obs_len: int = 8
    on_arrival: str = "stand"  # stand | resample

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.on_arrival not in ("stand", "resample"):
            raise ValueError("on_arrival must be 'stand' or 'resample'")


@dataclass(frozen=True)
class Scenario:
    ped_starts: np.ndarray  # (n, 2)
    ped_goals: np.ndarray  # (n, 2)
    ped_radii: np.ndarray  # (n,)
    ped_v_prefs: np.ndarray  # (n,)
    vehicle_start: np.ndarray
    vehicle_goal: np.ndarray
    vehicle_radius: float = 0.3
    vehicle_v_pref: float = 1.0
    circle_radius: float = 4.0
    seed: int = 0
    visible: bool = False
    orca: OrcaParams = field(default_factory=OrcaParams)

    def __post_init__(self):
        for name in ("ped_starts", "ped_goals"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1, 2))
        for name in ("ped_radii", "ped_v_prefs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "vehicle_start", np.asarray(self.vehicle_start, dtype=float).reshape(2))
        object.__setattr__(self, "vehicle_goal", np.asarray(self.vehicle_goal, dtype=float).reshape(2))

    @property
    def n_pedestrians(self) -> int:
        return len(self.ped_starts)

    def to_dict(self) -> dict:
        return {
            "ped_starts": self.ped_starts.tolist(),
            "ped_goals": self.ped_goals.tolist(),
            "ped_radii": self.ped_radii.tolist(),
            "ped_v_prefs": self.ped_v_prefs.tolist(),
            "vehicle_start": self.vehicle_start.tolist(),
            "vehicle_goal": self.vehicle_goal.tolist(),
            "vehicle_radius": self.vehicle_radius,
            "vehicle_v_pref": self.vehicle_v_pref,
            "circle_radius": self.circle_radius,
            "seed": self.seed,
            "visible": self.visible,
            "orca": asdict(self.orca),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["orca"] = OrcaParams(**d.get("orca", {}))
        return cls(**d)

    def digest(self) -> str:
        """Stable hash used to check that paired runs saw the same scenario."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _perturbation(rng: np.random.Generator, std: float) -> np.ndarray:
    # truncated at 3 sigma so every start stays within the documented band
    if std <= 0:
        return np.zeros(2)
    while True:
        e = rng.normal(0.0, std, size=2)
        if np.hypot(e[0], e[1]) <= 3 * std:
            return e


def generate_scenario(n_pedestrians: int, seed: int, cfg: ScenarioConfig = ScenarioConfig()) -> Scenario:
    """Pedestrians on a circle heading for the antipodal point, vehicle crossing bottom to top.

    Deterministic for a fixed ``(seed, cfg)``. Starts (and goals) that would
    overlap an already placed agent are redrawn, up to ``cfg.max_attempts``
    times per pedestrian.
    """
    if n_pedestrians < 1:
        raise ValueError("n_pedestrians must be >= 1")
    rng = np.random.default_rng(seed)
    R = cfg.circle_radius
    veh_start = np.array([0.0, -R]) + _perturbation(rng, cfg.vehicle_start_std)
    veh_goal = np.array([0.0, R]) + _perturbation(rng, cfg.goal_std)
    o = cfg.orca
    starts, goals, radii, v_prefs = [], [], [], []
    for _ in range(n_pedestrians):
        radius = float(np.clip(rng.normal(o.radius_mean, o.radius_std), 0.2, 0.4))
        v_pref = float(np.clip(rng.normal(o.v_pref_mean, o.v_pref_std), 0.5, 1.5))
        for _attempt in range(cfg.max_attempts):
            angle = rng.uniform(0.0, 2 * math.pi)
            base = R * np.array([math.cos(angle), math.sin(angle)])
            start = base + _perturbation(rng, cfg.position_std)
            goal = -base + _perturbation(rng, cfg.goal_std)
            ok = np.hypot(*(start - veh_start)) >= radius + cfg.vehicle_radius + cfg.spawn_margin
            ok = ok and np.hypot(*(goal - veh_goal)) >= radius + cfg.vehicle_radius + cfg.spawn_margin
            for s, g, r in zip(starts, goals, radii):
                if not ok:
                    break
                ok = np.hypot(*(start - s)) >= radius + r + cfg.spawn_margin
                ok = ok and np.hypot(*(goal - g)) >= radius + r + cfg.spawn_margin
            if ok:
                break
        else:
            raise ScenarioError(f"could not place pedestrian {len(starts)} after {cfg.max_attempts} attempts")
        starts.append(start)
        goals.append(goal)
        radii.append(radius)
        v_prefs.append(v_pref)
    return Scenario(
        np.array(starts),
        np.array(goals),
        np.array(radii),
        np.array(v_prefs),
        veh_start,
        veh_goal,
        cfg.vehicle_radius,
        cfg.vehicle_v_pref,
        R,
        seed,
        cfg.visible,
        cfg.orca,
    )


@dataclass(frozen=True)
class Transition:
    state: JointState
    d_min: float
    reached_goal: bool
    collided: bool
    timed_out: bool

    @property
    def done(self) -> bool:
        return self.reached_goal or self.collided or self.timed_out


class CrowdEnv:
    """One episode of a scenario. Single-threaded and mutable; make one per worker."""

    def __init__(self, scenario: Scenario, sim: SimConfig = SimConfig()):
        self.scenario = scenario
        self.sim = sim
        self.reset()

    def reset(self) -> JointState:
        sc = self.scenario
        self.ped_pos = sc.ped_starts.copy()
        self.ped_vel = np.zeros_like(self.ped_pos)
        self.ped_goals = sc.ped_goals.copy()
        to_goal = sc.vehicle_goal - sc.vehicle_start
        self.vehicle = VehicleState(
            sc.vehicle_start,
            np.zeros(2),
            sc.vehicle_radius,
            sc.vehicle_goal,
            sc.vehicle_v_pref,
            math.atan2(to_goal[1], to_goal[0]),
        )
        self.time = 0.0
        self.steps = 0
        self.done = False
        self.history = [self.ped_pos.copy()]
        self.last_orca: OrcaResult | None = None
        self.last_ped_min_sep = math.inf
        self._rng = np.random.default_rng([sc.seed, 7])
        return self.state()

    def state(self) -> JointState:
        peds = tuple(
            PedestrianState(p, v, r) for p, v, r in zip(self.ped_pos, self.ped_vel, self.scenario.ped_radii)
        )
        return JointState(self.vehicle, peds, self.time)

    def tracks(self, k: int | None = None) -> ObservedTracks:
        """The last ``k`` pedestrian positions, padded at the front with the earliest one."""
        k = self.sim.obs_len if k is None else k
        hist = self.history[-k:]
        hist = [hist[0]] * (k - len(hist)) + hist
        return ObservedTracks(np.stack(hist, axis=1).reshape(self.scenario.n_pedestrians, k, 2), self.sim.dt)

    def pedestrian_velocities(self) -> OrcaResult:
        sc = self.scenario
        dt = self.sim.dt
        prefs = np.array(
            [preferred_velocity(p, g, vp, dt) for p, g, vp in zip(self.ped_pos, self.ped_goals, sc.ped_v_prefs)]
        ).reshape(-1, 2)
        pos, vel, radii, speeds = self.ped_pos, self.ped_vel, sc.ped_radii, sc.ped_v_prefs
        active = None
        if sc.visible:
            pos = np.vstack([pos, self.vehicle.position])
            vel = np.vstack([vel, self.vehicle.velocity])
            radii = np.append(radii, self.vehicle.radius)
            speeds = np.append(speeds, self.vehicle.v_pref)
            prefs = np.vstack([prefs, self.vehicle.velocity])
            active = np.append(np.ones(sc.n_pedestrians, dtype=bool), False)
        result = orca_velocities(pos, vel, radii, prefs, speeds, sc.orca, dt, active)
        if sc.visible:
            result.velocities = result.velocities[:-1]
            result.lines = result.lines[:-1]
            result.feasible = result.feasible[:-1]
        return result

    def step(self, action: Action) -> Transition:
        if self.done:
            raise EpisodeTerminated("episode already terminated")
        sc, dt = self.scenario, self.sim.dt
        n = sc.n_pedestrians
        if n:
            self.last_orca = self.pedestrian_velocities()
            new_vel = self.last_orca.velocities
        else:
            new_vel = np.zeros((0, 2))
        new_pos = self.ped_pos + new_vel * dt
        new_vehicle = propagate(self.vehicle, action, dt)

        if n:
            gaps = min_separation_batch(
                self.vehicle.position, new_vehicle.position, self.ped_pos, new_pos, self.vehicle.radius, sc.ped_radii
            )
            d_min = float(gaps.min())
            if n > 1:
                iu, ju = np.triu_indices(n, 1)
                self.last_ped_min_sep = float(
                    min_separation_batch(
                        self.ped_pos[iu], new_pos[iu], self.ped_pos[ju], new_pos[ju], sc.ped_radii[iu], sc.ped_radii[ju]
                    ).min()
                )
        else:
            d_min = math.inf

        self.ped_pos, self.ped_vel, self.vehicle = new_pos, new_vel, new_vehicle
        self.steps += 1
        self.time = self.steps * dt
        self.history.append(self.ped_pos.copy())
        if sc.n_pedestrians and self.sim.on_arrival == "resample":
            self._resample_goals()

        collided = d_min < 0
        reached = (not collided) and new_vehicle.goal_distance < new_vehicle.radius
        timed_out = (not collided) and (not reached) and self.time >= self.sim.time_limit - 1e-9
        self.done = collided or reached or timed_out
        return Transition(self.state(), d_min, reached, collided, timed_out)

    def _resample_goals(self):
        R = self.scenario.circle_radius
        for i, (p, g, r) in enumerate(zip(self.ped_pos, self.ped_goals, self.scenario.ped_radii)):
            if np.hypot(*(g - p)) < r:
                angle = self._rng.uniform(0, 2 * math.pi)
                self.ped_goals[i] = R * np.array([math.cos(angle), math.sin(angle)])
