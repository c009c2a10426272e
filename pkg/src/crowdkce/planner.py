"""Value-based action selection with kinematic constraints and action-space exploration.

A planning step runs two passes. The first takes the argmax of the one-step
lookahead value over a coarse discrete action space, after dropping actions
that violate the per-step speed/heading limits. The second refines that choice
on a small grid around it and takes the argmax again.

The lookahead value of an action is the immediate reward plus the discounted
state value of the hypothetical next joint state, computed once per prediction
sample and then aggregated over samples (worst case by default).
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .core import Action, EgoBatch, JointState, KinematicLimits, VehicleState, ego_transform, min_separation_batch, wrap_angle
from .predictors import ObservedTracks, PredictionSet

ValueFn = Callable[[EgoBatch], np.ndarray]

_TOL = 1e-9


def default_limits(dt: float = 0.25) -> KinematicLimits:
    """6.4 m/s^2 acceleration and 120 degrees of turn per step."""
    return KinematicLimits.from_accel(6.4, math.radians(120.0), dt)


@dataclass(frozen=True)
class PlannerConfig:
    gamma: float = 0.9
    dt: float = 0.25
    threshold: float = 0.1
    discomfort: float = 0.2
    aggregation: str = "mean"  # min | mean | weighted-mean
    speed_samples: int = 5
    heading_samples: int = 16
    kce: bool = True
    eps_speed: float | None = None  # None -> 0.1 * v_pref
    eps_heading: float = math.radians(6.0)
    n_expand: int = 2
    limits: KinematicLimits | None = None  # None -> default_limits(dt)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.aggregation not in ("min", "mean", "weighted-mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.n_expand < 0:
            raise ValueError("n_expand must be >= 0")
        if self.eps_heading <= 0 or (self.eps_speed is not None and self.eps_speed <= 0):
            raise ValueError("exploration steps must be positive")

    def eps(self, v_pref: float) -> tuple[float, float]:
        return (0.1 * v_pref if self.eps_speed is None else self.eps_speed, self.eps_heading)

    def effective_limits(self) -> KinematicLimits:
        if not self.kce:
            return KinematicLimits.unbounded()
        return default_limits(self.dt) if self.limits is None else self.limits

    def discount(self, v_pref: float) -> float:
        return self.gamma ** (self.dt * v_pref)


@dataclass(frozen=True)
class ActionSpace:
    speeds: np.ndarray
    headings: np.ndarray
    provenance: str = "initial"  # initial | expanded

    def __post_init__(self):
        object.__setattr__(self, "speeds", np.asarray(self.speeds, dtype=float).reshape(-1))
        object.__setattr__(self, "headings", wrap_angle(np.asarray(self.headings, dtype=float).reshape(-1)))

    def __len__(self) -> int:
        return len(self.speeds)

    def __getitem__(self, i) -> Action:
        return Action(self.speeds[i], self.headings[i])

    def actions(self) -> list[Action]:
        return [self[i] for i in range(len(self))]

    def subset(self, keep) -> "ActionSpace":
        return ActionSpace(self.speeds[keep], self.headings[keep], self.provenance)

    @classmethod
    def from_actions(cls, actions, provenance: str = "initial") -> "ActionSpace":
        return cls([a.speed for a in actions], [a.heading for a in actions], provenance)


def build_initial_space(v_pref: float, speed_samples: int = 5, heading_samples: int = 16) -> ActionSpace:
    """Exponentially spaced speeds in (0, v_pref] times uniform headings, plus stop."""
    if not v_pref > 0:
        raise ValueError("v_pref must be positive")
    speeds = [(math.exp((i + 1) / speed_samples) - 1) / (math.e - 1) * v_pref for i in range(speed_samples)]
    speeds[-1] = float(v_pref)
    headings = np.arange(heading_samples) * (2 * math.pi / heading_samples)
    sp, hd = np.meshgrid(speeds, headings, indexing="ij")
    return ActionSpace(np.append(0.0, sp.ravel()), np.append(0.0, hd.ravel()))


def _velocities(speeds, headings) -> np.ndarray:
    return np.stack([speeds * np.cos(headings), speeds * np.sin(headings)], axis=-1)


def kinematic_filter(space: ActionSpace, prev: Action, limits: KinematicLimits) -> ActionSpace:
    """Keep actions whose speed change, heading change and velocity change are within limits."""
    ok = np.abs(space.speeds - prev.speed) <= limits.max_speed_change + _TOL
    ok &= np.abs(wrap_angle(space.headings - prev.heading)) <= limits.max_heading_change + _TOL
    if math.isfinite(limits.max_velocity_change):
        dv = _velocities(space.speeds, space.headings) - prev.velocity
        ok &= np.hypot(dv[:, 0], dv[:, 1]) <= limits.max_velocity_change + _TOL
    return space.subset(ok)


def f_delta(a_t: Action, a_prev: Action, threshold: float) -> float:
    """Smoothness term: threshold minus the magnitude of the velocity change."""
    return threshold - float(np.linalg.norm(a_t.velocity - a_prev.velocity))


def reward(d_min: float, reached_goal: bool, a_t: Action, a_prev: Action, cfg: PlannerConfig = PlannerConfig()) -> float:
    fd = f_delta(a_t, a_prev, cfg.threshold)
    if d_min < 0:
        return -0.25 + fd
    if d_min < cfg.discomfort:
        return -0.1 - d_min / 2 + fd
    if reached_goal:
        return 1.0 + fd
    return 0.0


def _reward_array(d_min, reached, fd, cfg: PlannerConfig):
    return np.where(
        d_min < 0,
        -0.25 + fd,
        np.where(d_min < cfg.discomfort, -0.1 - d_min / 2 + fd, np.where(reached, 1.0 + fd, 0.0)),
    )


def _aggregate(values: np.ndarray, weights: np.ndarray, mode: str) -> np.ndarray:
    if mode == "min":
        return values.min(axis=1)
    if mode == "mean":
        return values.mean(axis=1)
    return values @ weights


def evaluate_actions(
    space: ActionSpace,
    vehicle: VehicleState,
    ped_now: np.ndarray,
    ped_next: np.ndarray,
    ped_radii: np.ndarray,
    weights: np.ndarray,
    prev_velocity: np.ndarray,
    value_fn: ValueFn,
    cfg: PlannerConfig,
) -> np.ndarray:
    """Aggregated lookahead value of every action in ``space``.

    ``ped_now`` and ``ped_next`` are (m, n, 2): each sample's pedestrian
    positions at the start and end of the step.
    """
    K = len(space)
    m, n = ped_next.shape[:2]
    dt = cfg.dt
    vel = _velocities(space.speeds, space.headings)
    new_pos = vehicle.position + vel * dt
    if n:
        gaps = min_separation_batch(
            vehicle.position,
            new_pos[:, None, None, :],
            ped_now[None],
            ped_next[None],
            vehicle.radius,
            ped_radii,
        )
        d_min = gaps.min(axis=2)  # (K, m)
    else:
        d_min = np.full((K, m), np.inf)
    reached = np.hypot(*(new_pos - vehicle.goal).T) < vehicle.radius
    dv = vel - prev_velocity
    fd = cfg.threshold - np.hypot(dv[:, 0], dv[:, 1])
    R = _reward_array(d_min, reached[:, None], fd[:, None], cfg)

    ped_vel = (ped_next - ped_now) / dt
    batch = ego_transform(
        np.repeat(new_pos, m, axis=0),
        np.repeat(vel, m, axis=0),
        np.repeat(space.headings, m),
        vehicle.goal,
        vehicle.v_pref,
        vehicle.radius,
        np.tile(ped_next, (K, 1, 1)),
        np.tile(ped_vel, (K, 1, 1)),
        ped_radii,
    )
    V = np.asarray(value_fn(batch), dtype=float).reshape(K, m)
    return _aggregate(R + cfg.discount(vehicle.v_pref) * V, weights, cfg.aggregation)


def _now_next(js: JointState, preds: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    m = preds.m
    now = np.broadcast_to(js.ped_positions()[None], (m, preds.n, 2))
    nxt = np.transpose(preds.trajectories[:, :, 0, :], (1, 0, 2))
    return now, nxt


def evaluate_action(a: Action, preds: PredictionSet, s_prev: JointState, value_fn: ValueFn, cfg: PlannerConfig = PlannerConfig()) -> float:
    """Aggregated lookahead value of a single action from ``s_prev``."""
    now, nxt = _now_next(s_prev, preds)
    space = ActionSpace.from_actions([a])
    v = evaluate_actions(
        space, s_prev.vehicle, now, nxt, s_prev.ped_radii(), preds.weights, s_prev.vehicle.velocity, value_fn, cfg
    )
    return float(v[0])


def argmax_index(values: np.ndarray, space: ActionSpace, prev_heading: float) -> int:
    """Highest value; ties go to higher speed, then smaller heading change, then earlier index."""
    turn = np.abs(wrap_angle(space.headings - prev_heading))
    order = np.lexsort((np.arange(len(space)), turn, -space.speeds, -values))
    return int(order[0])


def select_initial(
    space: ActionSpace, preds: PredictionSet, s_prev: JointState, value_fn: ValueFn, cfg: PlannerConfig = PlannerConfig()
) -> Action:
    if len(space) == 0:
        raise ValueError("action space is empty")
    now, nxt = _now_next(s_prev, preds)
    values = evaluate_actions(
        space, s_prev.vehicle, now, nxt, s_prev.ped_radii(), preds.weights, s_prev.vehicle.velocity, value_fn, cfg
    )
    return space[argmax_index(values, space, s_prev.vehicle.heading)]


def _canonical_stop(space: ActionSpace, heading: float) -> ActionSpace:
    # a stopped vehicle keeps its heading
    headings = np.where(space.speeds == 0.0, heading, space.headings)
    return _dedupe(ActionSpace(space.speeds, headings, space.provenance))


def _dedupe(space: ActionSpace) -> ActionSpace:
    seen = set()
    keep = []
    for i, (s, h) in enumerate(zip(space.speeds, space.headings)):
        key = (round(s, 9), round(h, 9) if s > 0 else None)
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return space.subset(np.array(keep, dtype=int))


def expand_space(
    a_bar: Action,
    eps: tuple[float, float],
    n: int,
    limits: KinematicLimits | None,
    v_pref: float,
    prev: Action | None = None,
) -> ActionSpace:
    """Grid of (speed +- i*eps_speed, heading +- j*eps_heading), 0 <= i, j <= n, around ``a_bar``.

    Speeds are clipped to [0, v_pref]; the grid is re-filtered against
    ``prev`` when both ``limits`` and ``prev`` are given. ``a_bar`` is always
    the first element.
    """
    offsets = np.arange(-n, n + 1, dtype=float)
    di, dj = np.meshgrid(offsets, offsets, indexing="ij")
    speeds = np.clip(a_bar.speed + di.ravel() * eps[0], 0.0, v_pref)
    headings = a_bar.heading + dj.ravel() * eps[1]
    still_heading = a_bar.heading if prev is None else prev.heading
    grid = ActionSpace(np.append(a_bar.speed, speeds), np.append(a_bar.heading, headings), "expanded")
    grid = ActionSpace(grid.speeds, np.where(grid.speeds == 0.0, still_heading, grid.headings), "expanded")
    grid = _dedupe(grid)
    if limits is not None and prev is not None:
        keep = kinematic_filter(grid, prev, limits)
        # a_bar already passed the first-pass filter
        grid = ActionSpace(np.append(a_bar.speed, keep.speeds), np.append(a_bar.heading, keep.headings), "expanded")
        grid = _dedupe(grid)
    return grid


@dataclass
class PlanResult:
    action: Action
    initial: Action
    initial_value: float
    final_value: float
    n_initial: int
    n_expanded: int


@dataclass
class Planner:
    """Two-pass planner bound to a value function and configuration."""

    value_fn: ValueFn
    cfg: PlannerConfig = field(default_factory=PlannerConfig)
    _spaces: dict = field(default_factory=dict, repr=False)

    def initial_space(self, v_pref: float) -> ActionSpace:
        key = (v_pref, self.cfg.speed_samples, self.cfg.heading_samples)
        if key not in self._spaces:
            self._spaces[key] = build_initial_space(v_pref, self.cfg.speed_samples, self.cfg.heading_samples)
        return self._spaces[key]

    def plan_from(
        self,
        vehicle: VehicleState,
        prev: Action,
        ped_now: np.ndarray,
        ped_next: np.ndarray,
        ped_radii: np.ndarray,
        weights: np.ndarray,
        explore: bool = True,
        candidates: ActionSpace | None = None,
    ) -> PlanResult:
        """Plan one step given per-sample pedestrian positions now and next, (m, n, 2) each."""
        cfg = self.cfg
        limits = cfg.effective_limits()
        space = self.initial_space(vehicle.v_pref) if candidates is None else candidates
        if cfg.kce:
            # holding the previous command always satisfies the limits
            space = ActionSpace(np.append(space.speeds, prev.speed), np.append(space.headings, prev.heading))
        space = _canonical_stop(space, prev.heading)
        if cfg.kce:
            space = kinematic_filter(space, prev, limits)
        args = (vehicle, ped_now, ped_next, ped_radii, weights, prev.velocity, self.value_fn, cfg)
        values = evaluate_actions(space, *args)
        i = argmax_index(values, space, prev.heading)
        a_bar, v_bar = space[i], float(values[i])
        result = PlanResult(a_bar, a_bar, v_bar, v_bar, len(space), 0)
        if not (cfg.kce and explore and cfg.n_expand > 0):
            return result
        expanded = expand_space(a_bar, cfg.eps(vehicle.v_pref), cfg.n_expand, limits, vehicle.v_pref, prev)
        rest = expanded.subset(np.arange(1, len(expanded)))
        if len(rest):
            # a_bar keeps its first-pass value so the refinement can never lose value
            values_e = np.append(v_bar, evaluate_actions(rest, *args))
            j = argmax_index(values_e, expanded, prev.heading)
            result.action, result.final_value = expanded[j], float(values_e[j])
        result.n_expanded = len(expanded)
        return result

    def plan(self, js: JointState, preds: PredictionSet, prev: Action) -> PlanResult:
        now, nxt = _now_next(js, preds)
        return self.plan_from(js.vehicle, prev, now, nxt, js.ped_radii(), preds.weights)


def previous_action(vehicle: VehicleState) -> Action:
    """The vehicle's current (speed, heading); heading is held while stopped."""
    return Action(float(np.hypot(*vehicle.velocity)), vehicle.heading)


def plan_step(
    js: JointState,
    tracks: ObservedTracks,
    prev: Action,
    value_fn: ValueFn,
    predictor: Callable[[ObservedTracks], PredictionSet],
    cfg: PlannerConfig = PlannerConfig(),
) -> Action:
    """Predict, filter, pick the first-pass argmax, refine on the local grid, return the action."""
    preds = predictor(tracks)
    result = Planner(value_fn, cfg).plan(js, preds, prev)
    assert result.final_value >= result.initial_value
    return result.action
