"""Optimal reciprocal collision avoidance for disc agents.

Follows the reference RVO2 construction: one half-plane of permitted velocities
per neighbour, then an incremental 2D linear program that finds the velocity
closest to the preferred one inside the half-planes and the speed disc. When
the half-planes have no common point a 3D program minimises the largest
violation instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-9


@dataclass(frozen=True)
class OrcaParams:
    time_horizon: float = 5.0
    neighbor_dist: float = 10.0
    max_neighbors: int = 10
    v_pref_mean: float = 1.0
    v_pref_std: float = 0.1
    radius_mean: float = 0.3
    radius_std: float = 0.02
    safety_space: float = 0.02

    def __post_init__(self):
        if not self.time_horizon > 0:
            raise ValueError("time_horizon must be positive")
        if self.v_pref_std < 0 or self.radius_std < 0:
            raise ValueError("standard deviations must be non-negative")


@dataclass(frozen=True)
class Line:
    """Directed line; the permitted side is to the left of ``direction``."""

    point: tuple[float, float]
    direction: tuple[float, float]

    def violation(self, v) -> float:
        """Positive when ``v`` lies outside the half-plane (distance to the line)."""
        dx, dy = self.direction
        return dx * (self.point[1] - v[1]) - dy * (self.point[0] - v[0])


def _det(ax, ay, bx, by):
    return ax * by - ay * bx


def _lp1(lines, line_no, radius, opt, direction_opt):
    px, py = lines[line_no].point
    dx, dy = lines[line_no].direction
    dot = px * dx + py * dy
    disc = dot * dot + radius * radius - (px * px + py * py)
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t_left, t_right = -dot - sq, -dot + sq
    for i in range(line_no):
        qx, qy = lines[i].point
        ex, ey = lines[i].direction
        denom = _det(dx, dy, ex, ey)
        numer = _det(ex, ey, px - qx, py - qy)
        if abs(denom) <= EPS:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if opt[0] * dx + opt[1] * dy > 0.0 else t_left
    else:
        t = dx * (opt[0] - px) + dy * (opt[1] - py)
        t = min(max(t, t_left), t_right)
    return (px + t * dx, py + t * dy)


def _lp2(lines, radius, opt, direction_opt):
    if direction_opt:
        result = (opt[0] * radius, opt[1] * radius)
    elif opt[0] ** 2 + opt[1] ** 2 > radius * radius:
        n = math.hypot(opt[0], opt[1])
        result = (opt[0] / n * radius, opt[1] / n * radius)
    else:
        result = (opt[0], opt[1])
    for i, line in enumerate(lines):
        if line.violation(result) > 0.0:
            new = _lp1(lines, i, radius, opt, direction_opt)
            if new is None:
                return i, result
            result = new
    return len(lines), result


def _lp3(lines, begin, radius, result):
    distance = 0.0
    for i in range(begin, len(lines)):
        li = lines[i]
        if li.violation(result) > distance:
            proj = []
            dix, diy = li.direction
            for j in range(i):
                lj = lines[j]
                djx, djy = lj.direction
                determinant = _det(dix, diy, djx, djy)
                if abs(determinant) <= EPS:
                    if dix * djx + diy * djy > 0.0:
                        continue
                    point = (0.5 * (li.point[0] + lj.point[0]), 0.5 * (li.point[1] + lj.point[1]))
                else:
                    t = _det(djx, djy, li.point[0] - lj.point[0], li.point[1] - lj.point[1]) / determinant
                    point = (li.point[0] + t * dix, li.point[1] + t * diy)
                ux, uy = djx - dix, djy - diy
                un = math.hypot(ux, uy)
                proj.append(Line(point, (ux / un, uy / un)))
            fail, candidate = _lp2(proj, radius, (-diy, dix), True)
            if fail >= len(proj):
                result = candidate
            distance = li.violation(result)
    return result


def orca_lines(pos, vel, radius, others_pos, others_vel, others_radius, tau, dt) -> list[Line]:
    """Half-planes of velocities for one agent against each listed neighbour."""
    inv_tau = 1.0 / tau
    lines = []
    for qp, qv, qr in zip(others_pos, others_vel, others_radius):
        rpx, rpy = qp[0] - pos[0], qp[1] - pos[1]
        rvx, rvy = vel[0] - qv[0], vel[1] - qv[1]
        dist_sq = rpx * rpx + rpy * rpy
        comb = radius + qr
        comb_sq = comb * comb
        if dist_sq > comb_sq:
            wx, wy = rvx - inv_tau * rpx, rvy - inv_tau * rpy
            w_sq = wx * wx + wy * wy
            dot1 = wx * rpx + wy * rpy
            if dot1 < 0.0 and dot1 * dot1 > comb_sq * w_sq:
                wl = math.sqrt(w_sq)
                ux_, uy_ = wx / wl, wy / wl
                direction = (uy_, -ux_)
                ux, uy = (comb * inv_tau - wl) * ux_, (comb * inv_tau - wl) * uy_
            else:
                leg = math.sqrt(dist_sq - comb_sq)
                if _det(rpx, rpy, wx, wy) > 0.0:
                    direction = ((rpx * leg - rpy * comb) / dist_sq, (rpx * comb + rpy * leg) / dist_sq)
                else:
                    direction = (-(rpx * leg + rpy * comb) / dist_sq, -(-rpx * comb + rpy * leg) / dist_sq)
                dot2 = rvx * direction[0] + rvy * direction[1]
                ux, uy = dot2 * direction[0] - rvx, dot2 * direction[1] - rvy
        else:
            # already overlapping: push apart within one step
            inv_dt = 1.0 / dt
            wx, wy = rvx - inv_dt * rpx, rvy - inv_dt * rpy
            wl = math.hypot(wx, wy)
            if wl < EPS:
                wx, wy = (-rpx, -rpy) if dist_sq > EPS else (1.0, 0.0)
                wl = math.hypot(wx, wy)
            ux_, uy_ = wx / wl, wy / wl
            direction = (uy_, -ux_)
            ux, uy = (comb * inv_dt - wl) * ux_, (comb * inv_dt - wl) * uy_
        lines.append(Line((vel[0] + 0.5 * ux, vel[1] + 0.5 * uy), direction))
    return lines


def solve_velocity(lines: list[Line], pref_velocity, max_speed: float) -> tuple[np.ndarray, bool]:
    """Closest velocity to ``pref_velocity`` inside all half-planes and the speed disc.

    Returns the velocity and whether the 2D program was feasible.
    """
    fail, result = _lp2(lines, max_speed, (float(pref_velocity[0]), float(pref_velocity[1])), False)
    feasible = fail >= len(lines)
    if not feasible:
        result = _lp3(lines, fail, max_speed, result)
    return np.array(result, dtype=float), feasible


def preferred_velocity(position, goal, v_pref: float, dt: float) -> np.ndarray:
    """Unit vector toward the goal times ``v_pref``, shortened so the goal is not overshot."""
    to_goal = np.asarray(goal, dtype=float) - np.asarray(position, dtype=float)
    dist = float(np.hypot(to_goal[0], to_goal[1]))
    if dist < 1e-9:
        return np.zeros(2)
    speed = min(v_pref, dist / dt)
    return to_goal / dist * speed


def neighbours(i: int, positions: np.ndarray, params: OrcaParams) -> list[int]:
    d = positions - positions[i]
    dist_sq = np.einsum("ij,ij->i", d, d)
    order = [j for j in np.lexsort((np.arange(len(positions)), dist_sq)) if j != i]
    cutoff = params.neighbor_dist ** 2
    return [int(j) for j in order if dist_sq[j] < cutoff][: params.max_neighbors]


@dataclass
class OrcaResult:
    velocities: np.ndarray
    lines: list[list[Line]]
    feasible: list[bool]


def orca_velocities(
    positions,
    velocities,
    radii,
    pref_velocities,
    max_speeds,
    params: OrcaParams,
    dt: float,
    active=None,
) -> OrcaResult:
    """One ORCA update for every active agent.

    Inactive agents (``active[i]`` false) are still seen as neighbours but keep
    their current velocity; this is how a vehicle visible to pedestrians is
    modelled.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    velocities = np.asarray(velocities, dtype=float).reshape(-1, 2)
    radii = np.asarray(radii, dtype=float).reshape(-1)
    prefs = np.asarray(pref_velocities, dtype=float).reshape(-1, 2)
    max_speeds = np.broadcast_to(np.asarray(max_speeds, dtype=float), radii.shape)
    n = len(positions)
    active = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    out = velocities.copy()
    all_lines: list[list[Line]] = []
    feasible: list[bool] = []
    for i in range(n):
        if not active[i]:
            all_lines.append([])
            feasible.append(True)
            continue
        nb = neighbours(i, positions, params)
        lines = orca_lines(
            positions[i],
            velocities[i],
            radii[i] + params.safety_space,
            positions[nb],
            velocities[nb],
            radii[nb] + params.safety_space,
            params.time_horizon,
            dt,
        )
        out[i], ok = solve_velocity(lines, prefs[i], float(max_speeds[i]))
        all_lines.append(lines)
        feasible.append(ok)
    return OrcaResult(out, all_lines, feasible)
