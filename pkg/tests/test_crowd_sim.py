import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdkce.core import Action, min_separation_batch
from crowdkce.crowd_sim import (
    CrowdEnv,
    EpisodeTerminated,
    Scenario,
    ScenarioConfig,
    ScenarioError,
    SimConfig,
    generate_scenario,
)


def single_ped_scenario(ped_start, ped_goal, veh_start=(0, -4), veh_goal=(0, 4), v_pref=1.0, visible=False):
    return Scenario(
        [ped_start], [ped_goal], [0.3], [v_pref], np.array(veh_start, float), np.array(veh_goal, float), visible=visible
    )


def test_generate_is_deterministic():
    a = generate_scenario(5, 42)
    b = generate_scenario(5, 42)
    assert a.digest() == b.digest()
    for f in ("ped_starts", "ped_goals", "ped_radii", "ped_v_prefs", "vehicle_start", "vehicle_goal"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert generate_scenario(5, 43).digest() != a.digest()


def test_unperturbed_single_pedestrian_is_antipodal():
    cfg = ScenarioConfig(position_std=0.0, goal_std=0.0, vehicle_start_std=0.0)
    sc = generate_scenario(1, 3, cfg)
    assert np.allclose(sc.ped_goals[0], -sc.ped_starts[0])
    assert math.dist(sc.ped_starts[0], sc.ped_goals[0]) == pytest.approx(8.0)
    assert np.allclose(sc.vehicle_start, [0, -4]) and np.allclose(sc.vehicle_goal, [0, 4])


def test_starts_in_band_and_separated_over_many_seeds():
    cfg = ScenarioConfig()
    for seed in range(1000):
        sc = generate_scenario(5, seed, cfg)
        r = np.hypot(*sc.ped_starts.T)
        assert np.all(np.abs(r - 4.0) <= 3 * cfg.position_std + 1e-12)
        for i in range(5):
            assert math.dist(sc.ped_starts[i], sc.vehicle_start) >= sc.ped_radii[i] + sc.vehicle_radius
            for j in range(i + 1, 5):
                assert math.dist(sc.ped_starts[i], sc.ped_starts[j]) >= sc.ped_radii[i] + sc.ped_radii[j]
        assert np.all((sc.ped_radii >= 0.2) & (sc.ped_radii <= 0.4))


def test_overcrowded_circle_fails():
    cfg = ScenarioConfig(circle_radius=0.5, position_std=0.0, goal_std=0.0, max_attempts=50)
    with pytest.raises(ScenarioError):
        generate_scenario(30, 0, cfg)


def test_rejects_empty_crowd_request():
    with pytest.raises(ValueError):
        generate_scenario(0, 0)


def test_scenario_round_trip():
    sc = generate_scenario(5, 7)
    again = Scenario.from_dict(sc.to_dict())
    assert again.digest() == sc.digest()


def test_reaching_goal():
    sc = single_ped_scenario((10, 10), (10, 12), veh_start=(0, 3.8), veh_goal=(0, 4))
    env = CrowdEnv(sc)
    tr = env.step(Action(0.8, math.pi / 2))
    assert tr.reached_goal and not tr.collided and tr.done


def test_driving_through_standing_pedestrian_collides():
    # pedestrian already at its goal stays put
    sc = single_ped_scenario((0, -3.5), (0, -3.5))
    env = CrowdEnv(sc)
    tr = env.step(Action(1.0, math.pi / 2))
    assert tr.collided and tr.d_min < 0 and not tr.reached_goal


def test_collision_iff_negative_dmin_and_dmin_matches_recomputation():
    sc = generate_scenario(5, 11)
    env = CrowdEnv(sc)
    rng = np.random.default_rng(0)
    while not env.done:
        before_v = env.vehicle.position.copy()
        before_p = env.ped_pos.copy()
        tr = env.step(Action(rng.uniform(0, 1), rng.uniform(-math.pi, math.pi)))
        again = min_separation_batch(before_v, tr.state.vehicle.position, before_p, env.ped_pos,
                                     sc.vehicle_radius, sc.ped_radii).min()
        assert tr.d_min == again
        assert tr.collided == (tr.d_min < 0)
        assert not (tr.collided and tr.reached_goal)


def test_stepping_terminated_episode_raises():
    sc = single_ped_scenario((0, -3.5), (0, -3.5))
    env = CrowdEnv(sc)
    env.step(Action(1.0, math.pi / 2))
    with pytest.raises(EpisodeTerminated):
        env.step(Action(0.0, 0.0))


def test_timeout():
    sc = single_ped_scenario((10, 10), (10, 10))
    env = CrowdEnv(sc, SimConfig(time_limit=1.0))
    trs = [env.step(Action(0.0, 0.0)) for _ in range(4)]
    assert [t.timed_out for t in trs] == [False, False, False, True]


def run(sc, actions):
    env = CrowdEnv(sc)
    out = []
    for a in actions:
        if env.done:
            break
        tr = env.step(a)
        out.append((tr.state.ped_positions().copy(), tr.d_min, tr.reached_goal, tr.collided, tr.timed_out))
    return out


def test_identical_actions_give_identical_transitions():
    sc = generate_scenario(5, 5)
    acts = [Action(0.5, 0.3 * i) for i in range(40)]
    a, b = run(sc, acts), run(sc, acts)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x[0], y[0]) and x[1:] == y[1:]


def test_invisible_vehicle_does_not_affect_pedestrians():
    sc = generate_scenario(5, 9)
    parked = replace(sc, vehicle_start=np.array([50.0, 50.0]), vehicle_goal=np.array([50.0, 80.0]))
    moving = CrowdEnv(sc)
    still = CrowdEnv(parked)
    for i in range(30):
        tr = moving.step(Action(0.9, math.pi / 2 + 0.1 * i)) if not moving.done else None
        still.step(Action(0.0, 0.0))
        if tr is None:
            break
        assert np.array_equal(moving.ped_pos, still.ped_pos)


def test_visible_vehicle_is_avoided():
    # pedestrian walks straight at a parked visible vehicle and must deflect
    sc = single_ped_scenario((0, 2), (0, -6), veh_start=(0, 0), veh_goal=(0, 0.01), visible=True)
    env = CrowdEnv(sc)
    for _ in range(20):
        tr = env.step(Action(0.0, 0.0))
        assert tr.d_min >= 0
        if tr.done:
            break


def test_tracks_pad_with_earliest_position():
    sc = generate_scenario(3, 2)
    env = CrowdEnv(sc)
    tr = env.tracks(8)
    assert tr.positions.shape == (3, 8, 2)
    assert np.array_equal(tr.positions[:, 0], tr.positions[:, -1])
    env.step(Action(0.0, 0.0))
    tr = env.tracks(8)
    assert np.array_equal(tr.positions[:, -1], env.ped_pos)
    assert np.array_equal(tr.positions[:, 0], sc.ped_starts)


def test_zero_pedestrian_environment():
    sc = Scenario(np.zeros((0, 2)), np.zeros((0, 2)), [], [], np.array([0, -4.0]), np.array([0, 4.0]))
    env = CrowdEnv(sc)
    tr = env.step(Action(1.0, math.pi / 2))
    assert tr.d_min == math.inf and not tr.collided
    assert env.tracks(8).positions.shape == (0, 8, 2)


def test_resample_goals_on_arrival():
    sc = single_ped_scenario((0, 0), (0.05, 0))
    env = CrowdEnv(sc, SimConfig(on_arrival="resample"))
    env.step(Action(0.0, 0.0))
    assert math.hypot(*env.ped_goals[0]) == pytest.approx(4.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_orca_pedestrians_stay_apart(seed):
    sc = generate_scenario(5, seed)
    sc = replace(sc, vehicle_start=np.array([100.0, 100.0]), vehicle_goal=np.array([100.0, 130.0]))
    env = CrowdEnv(sc, SimConfig(time_limit=12.0))
    while not env.done:
        env.step(Action(0.0, 0.0))
        assert env.last_ped_min_sep >= 0
        for lines, v, ok in zip(env.last_orca.lines, env.last_orca.velocities, env.last_orca.feasible):
            if ok:
                assert all(l.violation(v) <= 1e-9 for l in lines)
