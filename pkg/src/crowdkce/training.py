"""Value-network training: regression on ORCA demonstrations, then TD learning."""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from .core import EgoBatch, EgoJointState, to_ego_frame
from .crowd_sim import CrowdEnv, ScenarioConfig, SimConfig, generate_scenario
from .eval import OrcaPolicy, PlannerPolicy, Policy, compute_metrics, run_episode
from .planner import PlannerConfig, previous_action, reward
from .predictors import PredictorSpec
from .value_net import ReplayBuffer, SGDMomentum, ValueNetwork, gradient

EnvFactory = Callable[[int], CrowdEnv]

# training scenarios draw from seeds far from the evaluation suites
TRAIN_SEED_OFFSET = 1_000_000
VAL_SEED_OFFSET = 500_000


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    n_pedestrians: int = 5
    gamma: float = 0.9
    # imitation
    il_episodes: int = 1000
    il_epochs: int = 50
    il_lr: float = 0.01
    demo_safety_space: float = 0.15
    # reinforcement
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
    # False treats a timeout as truncation and bootstraps from the last state
    timeout_terminal: bool = True

    def __post_init__(self):
        if self.il_episodes < 0 or self.rl_episodes < 0:
            raise ValueError("episode counts must be non-negative")
        if self.capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    def epsilon(self, episode: int) -> float:
        if episode >= self.eps_decay:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * episode / self.eps_decay


@dataclass
class TrainingLog:
    phase: list[str] = field(default_factory=list)
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    success: list[float | None] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def add(self, phase, step, loss, success=None, seconds=0.0):
        self.phase.append(phase)
        self.step.append(step)
        self.loss.append(loss)
        self.success.append(success)
        self.seconds.append(seconds)

    def losses(self, phase: str) -> list[float]:
        return [l for p, l in zip(self.phase, self.loss) if p == phase]

    def to_csv(self) -> str:
        lines = ["phase,step,loss,success,seconds"]
        for p, s, l, acc, sec in zip(self.phase, self.step, self.loss, self.success, self.seconds):
            lines.append(f"{p},{s},{l!r},{'' if acc is None else repr(acc)},{sec:.1f}")
        return "\n".join(lines) + "\n"


def default_env_factory(n_pedestrians: int = 5, scenario: ScenarioConfig = ScenarioConfig(),
                        sim: SimConfig = SimConfig()) -> EnvFactory:
    def make(seed: int) -> CrowdEnv:
        return CrowdEnv(generate_scenario(n_pedestrians, seed, scenario), sim)
    return make


def discounted_returns(rewards: list[float], discount: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + discount * acc
        out[i] = acc
    return out


def rollout(env: CrowdEnv, policy: Policy, seed: int, reward_cfg: PlannerConfig):
    """Run one episode, returning the pre-action ego states, rewards and final status."""
    policy.reset(env, seed)
    states: list[EgoJointState] = []
    rewards: list[float] = []
    status = "timeout"
    while not env.done:
        states.append(to_ego_frame(env.state()))
        prev = previous_action(env.vehicle)
        action = policy.act(env)
        tr = env.step(action)
        rewards.append(reward(tr.d_min, tr.reached_goal, action, prev, reward_cfg))
        if tr.done:
            status = "success" if tr.reached_goal else "collision" if tr.collided else "timeout"
    policy.close()
    return states, rewards, status


def _stack(states: list[EgoJointState]) -> EgoBatch:
    return EgoBatch(np.stack([s.self_state for s in states]), np.stack([s.peds for s in states]))


def train_imitation(
    env_factory: EnvFactory,
    episodes: int,
    net: ValueNetwork,
    cfg: TrainingConfig = TrainingConfig(),
    buffer: ReplayBuffer | None = None,
    log: TrainingLog | None = None,
    demo: Policy | None = None,
) -> TrainingLog:
    """Fit the value net to discounted returns of ORCA-driven episodes.

    Only episodes that end in success or collision are kept; timeouts carry no
    terminal signal. Updates ``net.params`` in place.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    buffer = ReplayBuffer(cfg.capacity) if buffer is None else buffer
    log = TrainingLog() if log is None else log
    demo = OrcaPolicy(safety_space=cfg.demo_safety_space) if demo is None else demo
    reward_cfg = PlannerConfig(gamma=cfg.gamma, kce=False)
    for ep in range(episodes):
        seed = TRAIN_SEED_OFFSET + cfg.seed * 100_000 + ep
        env = env_factory(seed)
        states, rewards, status = rollout(env, demo, seed, reward_cfg)
        if status == "timeout":
            continue
        buffer.push(_stack(states), discounted_returns(rewards, reward_cfg.discount(env.vehicle.v_pref)))
    if len(buffer) == 0:
        raise RuntimeError("no usable demonstrations were collected")

    rng = np.random.default_rng([cfg.seed, 11])
    opt = SGDMomentum(cfg.il_lr, cfg.momentum)
    t0 = time.perf_counter()
    for epoch in range(cfg.il_epochs):
        order = rng.permutation(len(buffer))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch, targets = buffer.batch(order[start : start + cfg.batch_size])
            loss, grads = gradient(net.params, net.cfg, batch, targets)
            opt.step(net.params, grads)
            total += loss * len(targets)
            count += len(targets)
        log.add("il", epoch, total / count, None, time.perf_counter() - t0)
    return log


def validation_success(net: ValueNetwork, env_factory: EnvFactory, cases: int, seed: int,
                       reward_cfg: PlannerConfig, sim: SimConfig = SimConfig()) -> float:
    """Greedy success rate with constant-velocity prediction on a validation seed range."""
    policy = PlannerPolicy(net, PredictorSpec(kind="cvm", horizon=1, num_samples=1), reward_cfg, "val")
    logs = []
    for i in range(cases):
        s = VAL_SEED_OFFSET + seed * 10_000 + i
        env = env_factory(s)
        logs.append(run_episode(env.scenario, policy, "replan", env.sim, reward_cfg, s))
    return compute_metrics(logs).success_rate


def train_rl(
    env_factory: EnvFactory,
    episodes: int,
    net: ValueNetwork,
    cfg: TrainingConfig = TrainingConfig(),
    buffer: ReplayBuffer | None = None,
    log: TrainingLog | None = None,
    progress: Callable[[str], None] | None = None,
    checkpoint: Callable[[str, ValueNetwork], None] | None = None,
) -> TrainingLog:
    """Epsilon-greedy TD learning against a periodically synced target network.

    Rollouts plan one step ahead with constant-velocity prediction and no
    kinematic constraints. Targets are ``r + discount * V_target(s')`` and just
    ``r`` on the final transition. The best validation snapshot is kept and,
    when ``checkpoint`` is given, handed to it each time it improves.
    """
    buffer = ReplayBuffer(cfg.capacity) if buffer is None else buffer
    log = TrainingLog() if log is None else log
    reward_cfg = PlannerConfig(gamma=cfg.gamma, kce=False)
    rng = np.random.default_rng([cfg.seed, 13])
    opt = SGDMomentum(cfg.rl_lr, cfg.momentum)
    target = net.copy()
    policy = PlannerPolicy(net, PredictorSpec(kind="cvm", horizon=1, num_samples=1), reward_cfg, "rl")
    best = (-1.0, None)
    t0 = time.perf_counter()
    recent: list[float] = []
    for ep in range(episodes):
        seed = TRAIN_SEED_OFFSET + cfg.seed * 100_000 + cfg.il_episodes + ep
        env = env_factory(seed)
        policy.epsilon = cfg.epsilon(ep)
        states, rewards, status = rollout(env, policy, seed, reward_cfg)
        batch = _stack(states)
        discount = reward_cfg.discount(env.vehicle.v_pref)
        # the next state of transition i is the pre-action state of i + 1
        final = EgoBatch.concat([batch.take(slice(1, None)), to_ego_frame(env.state()).as_batch()])
        terminal = np.zeros(len(rewards), dtype=bool)
        terminal[-1] = cfg.timeout_terminal or status != "timeout"
        buffer.push(batch, td_targets(rewards, target(final), terminal, discount))

        losses = []
        for _ in range(cfg.train_batches):
            b, y = buffer.sample(rng, cfg.batch_size)
            loss, grads = gradient(net.params, net.cfg, b, y)
            opt.step(net.params, grads)
            losses.append(loss)
        recent.append(float(np.mean(losses)))

        if (ep + 1) % cfg.target_update == 0:
            target = net.copy()
        if cfg.val_interval and ((ep + 1) % cfg.val_interval == 0 or ep + 1 == episodes):
            acc = validation_success(net, env_factory, cfg.val_cases, cfg.seed, reward_cfg)
            log.add("rl", ep + 1, float(np.mean(recent)), acc, time.perf_counter() - t0)
            recent = []
            if acc > best[0]:
                best = (acc, {k: v.copy() for k, v in net.params.items()})
                if checkpoint:
                    checkpoint(f"rl-{ep + 1}", net)
            if progress:
                progress(f"rl episode {ep + 1}: loss {log.loss[-1]:.5f} val success {acc:.3f}")
    if best[1] is not None:
        net.params = best[1]
    return log


def td_targets(rewards, next_values, terminal, discount: float) -> np.ndarray:
    """``r + discount * V(s')`` with no bootstrap where ``terminal`` is set."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(next_values, dtype=float)
    return np.where(np.asarray(terminal, dtype=bool), r, r + discount * v)


def train(cfg: TrainingConfig, net: ValueNetwork, env_factory: EnvFactory | None = None,
          progress: Callable[[str], None] | None = None,
          checkpoint: Callable[[str, ValueNetwork], None] | None = None) -> TrainingLog:
    """Imitation, then TD learning on a fresh replay buffer."""
    env_factory = env_factory or default_env_factory(cfg.n_pedestrians)
    log = TrainingLog()
    if cfg.il_episodes:
        train_imitation(env_factory, cfg.il_episodes, net, cfg, None, log)
        if progress:
            progress(f"imitation done: loss {log.loss[-1]:.5f}")
        if checkpoint:
            checkpoint("il", net)
    if cfg.rl_episodes:
        # TD learning starts from an empty buffer; demonstration returns belong to the ORCA policy
        train_rl(env_factory, cfg.rl_episodes, net, cfg, None, log, progress, checkpoint)
    return log
