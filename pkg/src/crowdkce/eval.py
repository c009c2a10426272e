"""Episode runner, Monte Carlo harness and paired ablation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Action, JointState, propagate
from .crowd_sim import CrowdEnv, Scenario, ScenarioConfig, SimConfig, generate_scenario
from .orca import OrcaParams, orca_velocities, preferred_velocity
from .planner import Planner, PlannerConfig, previous_action, reward
from .predictors import Predictor, PredictorError, PredictorSpec
from .value_net import ValueNetwork, analytic_value

SCHEMA_VERSION = 1
MODES = ("replan", "open-loop-8")


# ---------------------------------------------------------------- policies


class Policy:
    name = "policy"

    def reset(self, env: CrowdEnv, seed: int) -> None:
        pass

    def act(self, env: CrowdEnv) -> Action:
        raise NotImplementedError

    def plan_sequence(self, env: CrowdEnv, k: int) -> list[Action]:
        """Commit to k actions from one observation; baselines repeat their first action."""
        return [self.act(env)] * k

    def close(self) -> None:
        pass


class PlannerPolicy(Policy):
    """Value-function planner over predicted pedestrian futures."""

    def __init__(self, value_fn, predictor: PredictorSpec = PredictorSpec(), cfg: PlannerConfig = PlannerConfig(),
                 name: str = "planner", epsilon: float = 0.0):
        self.planner = Planner(value_fn, cfg)
        self.predictor_spec = predictor
        self.name = name
        self.epsilon = epsilon
        self.predictor: Predictor | None = None
        self.rng = np.random.default_rng(0)
        self.last_result = None

    def reset(self, env, seed):
        self.close()
        self.predictor = Predictor(self.predictor_spec, seed)
        self.rng = np.random.default_rng([seed, 2])

    def _explore(self, env) -> Action | None:
        if self.epsilon > 0 and self.rng.random() < self.epsilon:
            space = self.planner.initial_space(env.vehicle.v_pref)
            return space[int(self.rng.integers(len(space)))]
        return None

    def act(self, env):
        random_action = self._explore(env)
        if random_action is not None:
            return random_action
        js = env.state()
        preds = self.predictor(env.tracks(self.predictor_spec.obs_len), max(1, self.predictor_spec.horizon))
        result = self.planner.plan(js, preds, previous_action(js.vehicle))
        assert result.final_value >= result.initial_value
        self.last_result = result
        return result.action

    def plan_sequence(self, env, k):
        js = env.state()
        horizon = max(k, self.predictor_spec.horizon)
        preds = self.predictor(env.tracks(self.predictor_spec.obs_len), horizon)
        traj = np.transpose(preds.trajectories, (1, 0, 2, 3))  # (m, n, H, 2)
        now = np.broadcast_to(js.ped_positions()[None], traj.shape[:2] + (2,))
        vehicle, prev = js.vehicle, previous_action(js.vehicle)
        actions = []
        for step in range(k):
            nxt = traj[:, :, step]
            result = self.planner.plan_from(vehicle, prev, now, nxt, js.ped_radii(), preds.weights)
            assert result.final_value >= result.initial_value
            actions.append(result.action)
            vehicle = propagate(vehicle, result.action, self.planner.cfg.dt)
            prev, now = result.action, nxt
        return actions

    def close(self):
        if self.predictor is not None:
            self.predictor.close()
            self.predictor = None


class OrcaPolicy(Policy):
    """Vehicle driven by ORCA, assuming pedestrians share avoidance effort."""

    name = "orca"

    def __init__(self, params: OrcaParams | None = None, safety_space: float | None = None):
        self.params = params
        self.safety_space = safety_space

    def act(self, env):
        js = env.state()
        v = js.vehicle
        params = self.params or env.scenario.orca
        if self.safety_space is not None:
            params = OrcaParams(**{**params.__dict__, "safety_space": self.safety_space})
        pos = np.vstack([v.position, js.ped_positions()])
        vel = np.vstack([v.velocity, js.ped_velocities()])
        radii = np.append(v.radius, js.ped_radii())
        pref = np.vstack([preferred_velocity(v.position, v.goal, v.v_pref, env.sim.dt), js.ped_velocities()])
        active = np.zeros(len(pos), dtype=bool)
        active[0] = True
        out = orca_velocities(pos, vel, radii, pref, np.append(v.v_pref, np.full(len(pos) - 1, np.inf)), params,
                              env.sim.dt, active)
        return Action.from_velocity(out.velocities[0], v.heading)


class StraightPolicy(Policy):
    """Head for the goal at preferred speed, ignoring everyone."""

    name = "straight"

    def act(self, env):
        v = env.vehicle
        return Action.from_velocity(preferred_velocity(v.position, v.goal, v.v_pref, env.sim.dt), v.heading)


class ScriptedPolicy(Policy):
    name = "scripted"

    def __init__(self, actions):
        self.actions = list(actions)

    def act(self, env):
        return self.actions[min(env.steps, len(self.actions) - 1)]


# ---------------------------------------------------------------- episode logs


@dataclass
class EpisodeLog:
    dt: float
    seed: int
    scenario: dict
    digest: str
    policy: str
    mode: str
    status: str = "running"  # success | collision | timeout | predictor_error
    initial: dict = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        sc = self.scenario
        agents = [{"kind": "vehicle", "radius": sc["vehicle_radius"], "v_pref": sc["vehicle_v_pref"],
                   "start": sc["vehicle_start"], "goal": sc["vehicle_goal"]}]
        agents += [{"kind": "pedestrian", "radius": r, "v_pref": vp, "start": s, "goal": g}
                   for s, g, r, vp in zip(sc["ped_starts"], sc["ped_goals"], sc["ped_radii"], sc["ped_v_prefs"])]
        return {
            "schema_version": SCHEMA_VERSION,
            "dt": self.dt,
            "seed": self.seed,
            "policy": self.policy,
            "mode": self.mode,
            "status": self.status,
            "error": self.error,
            "digest": self.digest,
            "scenario": sc,
            "agents": agents,
            "initial": self.initial,
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeLog":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported episode schema {d.get('schema_version')!r}")
        for key in ("dt", "seed", "scenario", "digest", "policy", "mode", "status", "initial", "steps"):
            if key not in d:
                raise ValueError(f"episode log missing {key!r}")
        return cls(d["dt"], d["seed"], d["scenario"], d["digest"], d["policy"], d["mode"], d["status"],
                   d["initial"], d["steps"], d.get("error"))

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def vehicle_velocities(self) -> np.ndarray:
        vs = [self.initial["velocities"][0]] + [s["velocities"][0] for s in self.steps]
        return np.array(vs, dtype=float).reshape(-1, 2)

    def vehicle_positions(self) -> np.ndarray:
        ps = [self.initial["positions"][0]] + [s["positions"][0] for s in self.steps]
        return np.array(ps, dtype=float).reshape(-1, 2)

    def accelerations(self) -> np.ndarray:
        v = self.vehicle_velocities()
        d = np.diff(v, axis=0)
        return np.hypot(d[:, 0], d[:, 1]) / self.dt


def _snapshot(js: JointState) -> tuple[list, list]:
    pos = [js.vehicle.position.tolist()] + [p.position.tolist() for p in js.pedestrians]
    vel = [js.vehicle.velocity.tolist()] + [p.velocity.tolist() for p in js.pedestrians]
    return pos, vel


def run_episode(scenario: Scenario, policy: Policy, mode: str = "replan", sim: SimConfig = SimConfig(),
                reward_cfg: PlannerConfig = PlannerConfig(), seed: int | None = None) -> EpisodeLog:
    """Roll out one episode and record everything needed to recompute the metrics."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    seed = scenario.seed if seed is None else seed
    env = CrowdEnv(scenario, sim)
    policy.reset(env, seed)
    pos, vel = _snapshot(env.state())
    log = EpisodeLog(sim.dt, seed, scenario.to_dict(), scenario.digest(), policy.name, mode,
                     initial={"t": 0.0, "positions": pos, "velocities": vel})
    queue: list[Action] = []
    try:
        while not env.done:
            if mode == "replan":
                action = policy.act(env)
            else:
                if not queue:
                    queue = policy.plan_sequence(env, 8)
                action = queue.pop(0)
            prev = previous_action(env.vehicle)
            tr = env.step(action)
            r = reward(tr.d_min, tr.reached_goal, action, prev, reward_cfg)
            pos, vel = _snapshot(tr.state)
            log.steps.append({
                "t": tr.state.time,
                "positions": pos,
                "velocities": vel,
                "action": [action.speed, action.heading],
                "reward": r,
                "d_min": tr.d_min if math.isfinite(tr.d_min) else None,
            })
            if tr.done:
                log.status = "success" if tr.reached_goal else "collision" if tr.collided else "timeout"
    except PredictorError as exc:
        log.status = "predictor_error"
        log.error = f"{type(exc).__name__}: {exc}"
    finally:
        policy.close()
    return log


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    n: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    error_rate: float
    mean_time: float | None
    max_accel: float
    mean_max_accel: float
    episode_max_accel: list[float]

    def row(self) -> dict:
        return {
            "cases": self.n,
            "success": self.success_rate,
            "collision": self.collision_rate,
            "timeout": self.timeout_rate,
            "error": self.error_rate,
            "time": self.mean_time,
            "max_acc": self.max_accel,
            "mean_max_acc": self.mean_max_accel,
        }


def episode_row(log: EpisodeLog) -> dict:
    acc = log.accelerations()
    d = [s["d_min"] for s in log.steps if s["d_min"] is not None]
    return {
        "seed": log.seed,
        "digest": log.digest,
        "status": log.status,
        "steps": len(log.steps),
        "time": log.steps[-1]["t"] if log.status == "success" else None,
        "max_acc": float(acc.max()) if len(acc) else 0.0,
        "min_d_min": min(d) if d else None,
        "return": float(sum(s["reward"] for s in log.steps)),
    }


def compute_metrics(logs: list[EpisodeLog]) -> Metrics:
    """Pure function of the episode logs; time is averaged over successful episodes only."""
    if not logs:
        raise ValueError("no episodes")
    rows = [episode_row(l) for l in sorted(logs, key=lambda l: l.seed)]
    n = len(rows)

    def rate(status):
        return sum(r["status"] == status for r in rows) / n

    times = [r["time"] for r in rows if r["status"] == "success"]
    maxes = [r["max_acc"] for r in rows]
    return Metrics(
        n,
        rate("success"),
        rate("collision"),
        rate("timeout"),
        rate("predictor_error"),
        math.fsum(times) / len(times) if times else None,
        max(maxes),
        math.fsum(maxes) / n,
        maxes,
    )


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentConfig:
    n_pedestrians: int = 5
    num_cases: int = 100
    base_seed: int = 10_000
    mode: str = "replan"
    policy: str = "planner"  # planner | orca | straight
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    name: str = "experiment"

    def __post_init__(self):
        if self.num_cases < 1:
            raise ValueError("num_cases must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.num_cases)]


def make_policy(exp: ExperimentConfig, value_fn=None) -> Policy:
    if exp.policy == "planner":
        return PlannerPolicy(value_fn if value_fn is not None else analytic_value, exp.predictor, exp.planner, exp.name)
    if exp.policy == "orca":
        return OrcaPolicy()
    if exp.policy == "straight":
        return StraightPolicy()
    raise ValueError(f"unknown policy {exp.policy!r}")


def _run_case(args) -> EpisodeLog:
    exp, value_fn, seed = args
    scenario = generate_scenario(exp.n_pedestrians, seed, exp.scenario)
    return run_episode(scenario, make_policy(exp, value_fn), exp.mode, exp.sim, exp.planner, seed)


@dataclass
class MonteCarloResult:
    metrics: Metrics
    rows: list[dict]
    logs: list[EpisodeLog]

    def table_csv(self) -> str:
        return rows_to_csv(self.rows)


def monte_carlo(exp: ExperimentConfig, value_fn=None, workers: int = 1, progress=None) -> MonteCarloResult:
    """Run ``num_cases`` seeded episodes (seed = base_seed + index) and aggregate."""
    jobs = [(exp, value_fn, s) for s in exp.seeds()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            logs = list(pool.map(_run_case, jobs))
    else:
        logs = []
        for job in jobs:
            logs.append(_run_case(job))
            if progress:
                progress(logs[-1])
    logs.sort(key=lambda l: l.seed)
    return MonteCarloResult(compute_metrics(logs), [episode_row(l) for l in logs], logs)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def metrics_text(named: dict[str, Metrics]) -> str:
    """Aligned plain-text table, one line per experiment."""
    head = f"{'experiment':<24}{'cases':>6}{'success':>9}{'collide':>9}{'timeout':>9}{'time':>8}{'max_acc':>9}{'mean_max':>10}"
    lines = [head, "-" * len(head)]
    for name, m in named.items():
        t = f"{m.mean_time:.2f}" if m.mean_time is not None else "nan"
        lines.append(f"{name:<24}{m.n:>6}{m.success_rate:>9.3f}{m.collision_rate:>9.3f}{m.timeout_rate:>9.3f}"
                     f"{t:>8}{m.max_accel:>9.3f}{m.mean_max_accel:>10.3f}")
    return "\n".join(lines) + "\n"


class SeedMismatch(ValueError):
    pass


@dataclass
class ComparisonReport:
    rows: list[dict]
    summary: dict

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def _rel(a, b):
    if a is None or b is None or a == 0:
        return None
    return (b - a) / a


def ablation_compare(a: MonteCarloResult, b: MonteCarloResult) -> ComparisonReport:
    """Paired per-seed deltas (b minus a), with mean relative change and sign counts."""
    ra = {r["seed"]: r for r in a.rows}
    rb = {r["seed"]: r for r in b.rows}
    if set(ra) != set(rb):
        raise SeedMismatch("experiments were run on different seed sets")
    rows = []
    for seed in sorted(ra):
        x, y = ra[seed], rb[seed]
        if x["digest"] != y["digest"]:
            raise SeedMismatch(f"seed {seed} produced different scenarios")
        row = {"seed": seed, "digest": x["digest"], "status_a": x["status"], "status_b": y["status"]}
        for key in ("max_acc", "time", "return"):
            row[f"{key}_a"], row[f"{key}_b"] = x[key], y[key]
            row[f"d_{key}"] = None if x[key] is None or y[key] is None else y[key] - x[key]
        row["d_success"] = int(y["status"] == "success") - int(x["status"] == "success")
        rows.append(row)
    summary = {}
    for key in ("max_acc", "time", "return"):
        deltas = [r[f"d_{key}"] for r in rows if r[f"d_{key}"] is not None]
        rel = [_rel(r[f"{key}_a"], r[f"{key}_b"]) for r in rows]
        rel = [v for v in rel if v is not None]
        summary[key] = {
            "pairs": len(deltas),
            "mean_delta": math.fsum(deltas) / len(deltas) if deltas else 0.0,
            "mean_relative": math.fsum(rel) / len(rel) if rel else 0.0,
            "negative": sum(d < 0 for d in deltas),
            "zero": sum(d == 0 for d in deltas),
            "positive": sum(d > 0 for d in deltas),
        }
    ma, mb = a.metrics, b.metrics
    summary["success"] = {"a": ma.success_rate, "b": mb.success_rate, "delta": mb.success_rate - ma.success_rate}
    summary["aggregate_mean_max_acc"] = {"a": ma.mean_max_accel, "b": mb.mean_max_accel,
                                         "relative": _rel(ma.mean_max_accel, mb.mean_max_accel) or 0.0}
    summary["aggregate_max_acc"] = {"a": ma.max_accel, "b": mb.max_accel,
                                    "relative": _rel(ma.max_accel, mb.max_accel) or 0.0}
    return ComparisonReport(rows, summary)


def load_value_fn(source: str, params_path: str | None = None):
    if source == "analytic":
        return analytic_value
    if source == "params":
        if not params_path or not Path(params_path).exists():
            raise FileNotFoundError(f"value-network params not found: {params_path}")
        return ValueNetwork.load(params_path)
    raise ValueError(f"unknown value source {source!r}")
