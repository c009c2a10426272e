"""Domain types and geometry shared by the simulator, predictors and planner.

All positions are metres in a fixed world frame, velocities m/s, angles radians.
Agents are discs; the vehicle is holonomic and reaches the commanded velocity
instantly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SELF_DIM = 6
PED_DIM = 7


def wrap_angle(angle):
    """Map an angle (scalar or array) into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + math.pi, 2 * math.pi) - math.pi
    wrapped = np.where(wrapped <= -math.pi, wrapped + 2 * math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def _vec(value) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(2)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Action:
    """Commanded velocity stored as (speed, absolute heading)."""

    speed: float
    heading: float

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.speed * math.cos(self.heading), self.speed * math.sin(self.heading)])

    @classmethod
    def from_velocity(cls, velocity, heading_if_still: float = 0.0) -> "Action":
        vx, vy = float(velocity[0]), float(velocity[1])
        speed = math.hypot(vx, vy)
        if speed == 0.0:
            return cls(0.0, heading_if_still)
        return cls(speed, math.atan2(vy, vx))


@dataclass(frozen=True)
class KinematicLimits:
    """Per-step bounds on speed change and heading change, plus an acceleration cap.

    ``max_speed_change`` is normally ``max_accel * dt`` (see :meth:`from_accel`).
    ``max_accel`` additionally bounds the full velocity-vector change per step,
    ``|v_t - v_{t-1}| <= max_accel * dt``. Infinite values disable a bound.
    """

    max_speed_change: float
    max_heading_change: float
    max_accel: float = math.inf
    dt: float = 0.25

    def __post_init__(self):
        for name in ("max_speed_change", "max_heading_change", "max_accel", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def max_velocity_change(self) -> float:
        return self.max_accel * self.dt

    @classmethod
    def from_accel(cls, max_accel: float, max_turn: float, dt: float) -> "KinematicLimits":
        return cls(max_accel * dt, max_turn, max_accel, dt)

    @classmethod
    def unbounded(cls) -> "KinematicLimits":
        return cls(math.inf, math.inf, math.inf)


@dataclass(frozen=True)
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    goal: np.ndarray
    v_pref: float
    heading: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("vehicle radius must be positive")
        if not self.v_pref > 0:
            raise ValueError("v_pref must be positive")
        object.__setattr__(self, "position", _vec(self.position))
        object.__setattr__(self, "velocity", _vec(self.velocity))
        object.__setattr__(self, "goal", _vec(self.goal))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def goal_distance(self) -> float:
        return float(np.linalg.norm(self.goal - self.position))


@dataclass(frozen=True)
class PedestrianState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float = 0.3

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("pedestrian radius must be positive")
        object.__setattr__(self, "position", _vec(self.position))
        object.__setattr__(self, "velocity", _vec(self.velocity))


@dataclass(frozen=True)
class JointState:
    vehicle: VehicleState
    pedestrians: tuple[PedestrianState, ...] = ()
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pedestrians", tuple(self.pedestrians))
        if self.time < 0:
            raise ValueError("time must be non-negative")

    def ped_positions(self) -> np.ndarray:
        return np.array([p.position for p in self.pedestrians], dtype=float).reshape(-1, 2)

    def ped_velocities(self) -> np.ndarray:
        return np.array([p.velocity for p in self.pedestrians], dtype=float).reshape(-1, 2)

    def ped_radii(self) -> np.ndarray:
        return np.array([p.radius for p in self.pedestrians], dtype=float)


def propagate(state: VehicleState, action: Action, dt: float) -> VehicleState:
    """Advance the vehicle for ``dt`` seconds at the commanded velocity."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = action.velocity
    return replace(state, position=state.position + v * dt, velocity=v, heading=action.heading)


def min_separation_batch(a0, a1, b0, b1, ra, rb) -> np.ndarray:
    """Vectorised :func:`min_separation`; inputs broadcast over leading axes."""
    a0, a1, b0, b1 = (np.asarray(x, dtype=float) for x in (a0, a1, b0, b1))
    p0 = a0 - b0
    d = (a1 - b1) - p0
    dd = np.sum(d * d, axis=-1)
    pd = np.sum(p0 * d, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(dd > 0, -pd / np.where(dd > 0, dd, 1.0), 0.0)
    tau = np.clip(tau, 0.0, 1.0)
    closest = p0 + tau[..., None] * d
    return np.sqrt(np.sum(closest * closest, axis=-1)) - ra - rb


def min_separation(a_t0, a_t1, b_t0, b_t1) -> float:
    """Smallest surface gap between two discs moving linearly over one interval.

    Each argument is an object with ``position`` and ``radius`` (the radius is
    taken from the ``t0`` state). Negative means the discs overlap at some
    instant.
    """
    gap = min_separation_batch(
        a_t0.position, a_t1.position, b_t0.position, b_t1.position, a_t0.radius, b_t0.radius
    )
    return float(gap)


@dataclass(frozen=True)
class EgoBatch:
    """Vehicle-centric features for a batch of joint states.

    ``self_state`` is (B, 6): goal distance, v_pref, heading, radius, vx, vy.
    ``peds`` is (B, n, 7): px, py, vx, vy, radius, distance to vehicle, radius sum.
    ``mask`` marks real pedestrians (padding allowed for mixed crowd sizes).
    """

    self_state: np.ndarray
    peds: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(self.peds.shape[:2], dtype=bool))

    def __len__(self) -> int:
        return self.self_state.shape[0]

    def take(self, idx) -> "EgoBatch":
        return EgoBatch(self.self_state[idx], self.peds[idx], self.mask[idx])

    @staticmethod
    def concat(batches: list["EgoBatch"]) -> "EgoBatch":
        n = max(b.peds.shape[1] for b in batches)
        selfs, peds, masks = [], [], []
        for b in batches:
            pad = n - b.peds.shape[1]
            selfs.append(b.self_state)
            peds.append(np.pad(b.peds, ((0, 0), (0, pad), (0, 0))))
            masks.append(np.pad(b.mask, ((0, 0), (0, pad))))
        return EgoBatch(np.concatenate(selfs), np.concatenate(peds), np.concatenate(masks))


def ego_transform(veh_pos, veh_vel, heading, goal, v_pref, radius, ped_pos, ped_vel, ped_radius) -> EgoBatch:
    """Rotate and translate a batch of joint states into the vehicle frame.

    Shapes: veh_pos/veh_vel (B, 2), heading (B,), goal (2,) or (B, 2),
    ped_pos/ped_vel (B, n, 2), ped_radius (n,) or (B, n).
    """
    veh_pos = np.asarray(veh_pos, dtype=float)
    veh_vel = np.asarray(veh_vel, dtype=float)
    B = veh_pos.shape[0]
    heading = np.broadcast_to(np.asarray(heading, dtype=float), (B,))
    to_goal = np.broadcast_to(np.asarray(goal, dtype=float), (B, 2)) - veh_pos
    dg = np.hypot(to_goal[:, 0], to_goal[:, 1])
    axis = np.where(dg > 1e-12, np.arctan2(to_goal[:, 1], to_goal[:, 0]), heading)
    c, s = np.cos(axis), np.sin(axis)

    def rot(v):
        # world -> ego: R(-axis) v, broadcasting over trailing pedestrian axis
        cc = c.reshape((B,) + (1,) * (v.ndim - 2))
        ss = s.reshape((B,) + (1,) * (v.ndim - 2))
        return np.stack([cc * v[..., 0] + ss * v[..., 1], cc * v[..., 1] - ss * v[..., 0]], axis=-1)

    v_ego = rot(veh_vel)
    self_state = np.stack(
        [
            dg,
            np.full(B, float(v_pref)),
            wrap_angle(heading - axis) if B else np.zeros(0),
            np.full(B, float(radius)),
            v_ego[:, 0],
            v_ego[:, 1],
        ],
        axis=1,
    )
    ped_pos = np.asarray(ped_pos, dtype=float).reshape(B, -1, 2)
    ped_vel = np.asarray(ped_vel, dtype=float).reshape(B, -1, 2)
    n = ped_pos.shape[1]
    rel = rot(ped_pos - veh_pos[:, None, :])
    pv = rot(ped_vel)
    pr = np.broadcast_to(np.asarray(ped_radius, dtype=float), (B, n))
    da = np.hypot(rel[..., 0], rel[..., 1])
    peds = np.stack([rel[..., 0], rel[..., 1], pv[..., 0], pv[..., 1], pr, da, pr + float(radius)], axis=-1)
    return EgoBatch(self_state, peds.reshape(B, n, PED_DIM))


@dataclass(frozen=True)
class EgoJointState:
    """Single joint state expressed in the vehicle frame (vehicle at origin, goal on +x)."""

    self_state: np.ndarray
    peds: np.ndarray

    @property
    def goal_distance(self) -> float:
        return float(self.self_state[0])

    @property
    def ped_positions(self) -> np.ndarray:
        return self.peds[:, :2]

    def as_batch(self) -> EgoBatch:
        return EgoBatch(self.self_state[None, :], self.peds[None, :, :])


def to_ego_frame(js: JointState) -> EgoJointState:
    v = js.vehicle
    batch = ego_transform(
        v.position[None],
        v.velocity[None],
        np.array([v.heading]),
        v.goal,
        v.v_pref,
        v.radius,
        js.ped_positions()[None],
        js.ped_velocities()[None],
        js.ped_radii(),
    )
    return EgoJointState(batch.self_state[0], batch.peds[0])
