import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import stdio_command
from crowdkce.predictors import (
    ExternalPredictor,
    ObservedTracks,
    PredictionSet,
    Predictor,
    PredictorProtocolError,
    PredictorSpec,
    PredictorTimeout,
    SamplerConfig,
    decode_response,
    encode_request,
    predict_cvm,
    predict_external,
    predict_linear,
    predict_multimodal,
)


def tracks_from(points, dt=0.25):
    return ObservedTracks(np.asarray(points, float)[None], dt)


def constant_velocity_tracks(n=3, k=8, seed=0):
    rng = np.random.default_rng(seed)
    start = rng.uniform(-4, 4, (n, 1, 2))
    step = rng.uniform(-0.3, 0.3, (n, 1, 2))
    return ObservedTracks(start + np.arange(k)[None, :, None] * step, 0.25)


def test_tracks_need_two_points():
    with pytest.raises(ValueError):
        ObservedTracks(np.zeros((2, 1, 2)), 0.25)


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((1, 0, 8, 2)))
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((1, 2, 8, 2)), np.array([0.7, 0.7]))
    assert np.allclose(PredictionSet(np.zeros((1, 4, 3, 2))).weights, 0.25)


# ---- constant velocity


def test_cvm_straight_line():
    p = predict_cvm(tracks_from([(0, 0), (0.25, 0)]), 3)
    assert p.m == 1 and p.horizon == 3
    assert np.allclose(p.trajectories[0, 0], [(0.5, 0), (0.75, 0), (1.0, 0)])


def test_cvm_stationary():
    p = predict_cvm(tracks_from([(1, 2)] * 4), 5)
    assert np.array_equal(p.trajectories[0, 0], np.tile([1.0, 2.0], (5, 1)))


def test_cvm_matches_two_point_formula_on_curved_track():
    t = np.linspace(0, 1.75, 8)
    track = np.stack([np.cos(t), np.sin(t)], axis=1)
    p = predict_cvm(tracks_from(track), 8).trajectories[0, 0]
    v = (track[-1] - track[-2]) / 0.25
    expected = np.array([track[-1] + v * 0.25 * h for h in range(1, 9)])
    assert np.allclose(p, expected, atol=1e-12)
    truth = np.stack([np.cos(1.75 + 0.25 * np.arange(1, 9)), np.sin(1.75 + 0.25 * np.arange(1, 9))], axis=1)
    err = np.hypot(*(p - truth).T)
    assert np.all(np.diff(err) > 0)


# ---- linear fit


def test_linear_equals_cvm_on_constant_velocity():
    tr = constant_velocity_tracks()
    assert np.allclose(predict_linear(tr, 8).trajectories, predict_cvm(tr, 8).trajectories, atol=1e-12)


def test_linear_matches_normal_equations():
    rng = np.random.default_rng(1)
    k = 8
    t = np.arange(k, dtype=float)
    track = np.stack([0.3 * t + 1, -0.1 * t + 2], axis=1) + rng.normal(0, 0.05, (k, 2))
    pred = predict_linear(tracks_from(track), 4).trajectories[0, 0]
    X = np.stack([np.ones(k), t], axis=1)
    coef = np.linalg.solve(X.T @ X, X.T @ track)
    future = np.stack([np.ones(4), np.arange(k, k + 4)], axis=1) @ coef
    assert np.allclose(pred, future, atol=1e-9)


def test_linear_stationary():
    pred = predict_linear(tracks_from([(3, -1)] * 8), 6).trajectories
    assert np.allclose(pred, [3, -1])


# ---- translation equivariance, all back-ends


@settings(max_examples=30)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 1000))
def test_translation_equivariance(dx, dy, seed):
    tr = constant_velocity_tracks(seed=seed)
    rng = np.random.default_rng(seed)
    tr = ObservedTracks(tr.positions + rng.normal(0, 0.05, tr.positions.shape), tr.dt)
    u = np.array([dx, dy])
    for fn in (lambda t: predict_cvm(t, 8), lambda t: predict_linear(t, 8),
               lambda t: predict_multimodal(t, 8, 5, seed, SamplerConfig(repulsion=True))):
        a = fn(tr).trajectories
        b = fn(tr.shifted(u)).trajectories
        assert np.allclose(b, a + u, atol=1e-9, rtol=0)


# ---- multimodal sampler


def test_multimodal_single_sample_is_cvm():
    tr = constant_velocity_tracks()
    assert np.array_equal(predict_multimodal(tr, 8, 1, 3).trajectories, predict_cvm(tr, 8).trajectories)


def test_multimodal_anchor_is_cvm():
    tr = constant_velocity_tracks()
    p = predict_multimodal(tr, 8, 20, 3)
    assert np.array_equal(p.trajectories[:, :1], predict_cvm(tr, 8).trajectories)


def test_multimodal_zero_noise_collapses():
    tr = constant_velocity_tracks()
    p = predict_multimodal(tr, 8, 10, 0, SamplerConfig(0.0, 0.0))
    assert np.allclose(p.trajectories, p.trajectories[:, :1], atol=1e-12)


def test_multimodal_reproducible():
    tr = constant_velocity_tracks()
    a = predict_multimodal(tr, 8, 20, 99).trajectories
    b = predict_multimodal(tr, 8, 20, 99).trajectories
    assert np.array_equal(a, b)
    assert not np.array_equal(a, predict_multimodal(tr, 8, 20, 100).trajectories)


def test_multimodal_heading_spread_statistics():
    # one moving pedestrian, headings of the non-anchor samples
    tr = tracks_from([(0, 0), (0.25, 0)])
    cfg = SamplerConfig(heading_std=0.3, speed_std=0.0)
    headings = []
    for seed in range(527):
        p = predict_multimodal(tr, 1, 20, seed, cfg).trajectories[0, 1:, 0]
        d = p - np.array([0.25, 0.0])
        headings.append(np.arctan2(d[:, 1], d[:, 0]))
    h = np.concatenate(headings)
    assert len(h) >= 10_000
    assert abs(h.std() - 0.3) <= 0.15 * 0.3


def test_multimodal_repulsion_pushes_apart():
    # two pedestrians predicted to meet head-on
    tr = ObservedTracks(np.array([[(-2.25, 0), (-2, 0)], [(2.25, 0), (2, 0)]], float), 0.25)
    plain = predict_multimodal(tr, 8, 1, 0).trajectories
    pushed = predict_multimodal(tr, 8, 1, 0, SamplerConfig(repulsion=True, repulsion_radius=0.6)).trajectories
    gap_plain = np.hypot(*(plain[0, 0] - plain[1, 0]).T).min()
    gap_pushed = np.hypot(*(pushed[0, 0] - pushed[1, 0]).T).min()
    assert gap_plain < 0.6 <= gap_pushed + 1e-9


def test_empty_crowd_predictions():
    tr = ObservedTracks(np.zeros((0, 8, 2)), 0.25)
    assert predict_multimodal(tr, 8, 5, 0).trajectories.shape == (0, 5, 8, 2)
    assert predict_cvm(tr, 8).trajectories.shape == (0, 1, 8, 2)


# ---- wire protocol


def test_request_format():
    tr = tracks_from([(0, 0), (0.25, 0)])
    msg = json.loads(encode_request(tr, 8, 20))
    assert msg == {"v": 1, "dt": 0.25, "horizon": 8, "samples": 20, "tracks": [[[0.0, 0.0], [0.25, 0.0]]]}


def test_decode_rejects_bad_payloads():
    good = {"v": 1, "preds": np.zeros((1, 2, 3, 2)).tolist()}
    assert decode_response(json.dumps(good), 1, 2, 3).m == 2
    with pytest.raises(PredictorProtocolError):
        decode_response("not json", 1, 2, 3)
    with pytest.raises(PredictorProtocolError):
        decode_response(json.dumps({"v": 2, "preds": good["preds"]}), 1, 2, 3)
    with pytest.raises(PredictorProtocolError):
        decode_response(json.dumps(good), 1, 3, 3)
    with pytest.raises(PredictorProtocolError):
        decode_response(json.dumps({"v": 1, "preds": [[[["a", 1]]]]}), 1, 1, 1)


def test_stdio_echo_server_equals_cvm(echo_command):
    tr = constant_velocity_tracks()
    p = predict_external(tr, 8, 4, echo_command)
    cvm = predict_cvm(tr, 8).trajectories
    assert p.trajectories.shape == (3, 4, 8, 2)
    assert np.allclose(p.trajectories, np.repeat(cvm, 4, axis=1), atol=1e-12)


def test_tcp_echo_server_equals_cvm(tcp_server):
    endpoint = tcp_server()
    tr = constant_velocity_tracks()
    with ExternalPredictor(endpoint) as client:
        for _ in range(3):
            p = client.predict(tr, 8, 1)
            assert np.allclose(p.trajectories, predict_cvm(tr, 8).trajectories, atol=1e-12)


def test_server_with_wrong_sample_count(tcp_server):
    endpoint = tcp_server(reply=lambda line: json.dumps({"v": 1, "preds": np.zeros((3, 2, 8, 2)).tolist()}))
    with pytest.raises(PredictorProtocolError, match="shape"):
        predict_external(constant_velocity_tracks(), 8, 5, endpoint)


def test_server_timeout_is_distinguishable(tcp_server):
    endpoint = tcp_server(delay=1.0)
    with pytest.raises(PredictorTimeout):
        predict_external(constant_velocity_tracks(), 8, 1, endpoint, timeout=0.2)


def test_stdio_timeout():
    slow = stdio_command("import sys, time\nfor line in sys.stdin:\n    time.sleep(2)\n")
    with pytest.raises(PredictorTimeout):
        predict_external(constant_velocity_tracks(), 8, 1, slow, timeout=0.3)


def test_server_that_exits_is_a_protocol_error():
    dead = stdio_command("import sys; sys.stdin.readline()")
    with pytest.raises(PredictorProtocolError):
        predict_external(constant_velocity_tracks(), 8, 1, dead, timeout=2.0)


def test_predictor_wrapper_dispatch():
    tr = constant_velocity_tracks()
    assert Predictor(PredictorSpec(kind="cvm"))(tr).m == 1
    assert Predictor(PredictorSpec(kind="linear"))(tr, 3).horizon == 3
    a = Predictor(PredictorSpec(kind="multimodal", num_samples=7), seed=5)
    b = Predictor(PredictorSpec(kind="multimodal", num_samples=7), seed=5)
    assert np.array_equal(a(tr).trajectories, b(tr).trajectories)
    with pytest.raises(ValueError):
        Predictor(PredictorSpec(kind="bogus"))
    with pytest.raises(ValueError):
        Predictor(PredictorSpec(kind="external"))


def test_predictor_wrapper_external(tcp_server):
    tr = constant_velocity_tracks()
    pred = Predictor(PredictorSpec(kind="external", num_samples=2, endpoint=tcp_server()))
    try:
        assert pred(tr).trajectories.shape == (3, 2, 8, 2)
    finally:
        pred.close()
