"""Pedestrian trajectory predictors.

Every predictor maps observed tracks (n pedestrians x k past positions) to a
:class:`PredictionSet` of m candidate futures per pedestrian, each H points
long. Back-ends: constant velocity, least-squares line, a seeded multimodal
sampler, and an out-of-process client speaking line-delimited JSON.
"""

from __future__ import annotations

import json
import shlex
import math
import os
import selectors
import socket
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1


class PredictorError(RuntimeError):
    pass


class PredictorTimeout(PredictorError):
    pass


class PredictorProtocolError(PredictorError):
    pass


@dataclass(frozen=True)
class ObservedTracks:
    """Past positions, shape (n, k, 2), oldest first, sampled every ``dt`` seconds."""

    positions: np.ndarray
    dt: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 2:
            pos = pos.reshape(pos.shape[0] if pos.size else 0, -1, 2)
        if pos.shape[0] and pos.shape[1] < 2:
            raise ValueError("need at least two observed points per pedestrian")
        object.__setattr__(self, "positions", pos)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.positions.shape[1]

    def shifted(self, offset) -> "ObservedTracks":
        return ObservedTracks(self.positions + np.asarray(offset, dtype=float), self.dt)


@dataclass(frozen=True)
class PredictionSet:
    """Candidate futures, shape (n, m, H, 2), with one weight per sample index."""

    trajectories: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        traj = np.asarray(self.trajectories, dtype=float)
        if traj.ndim != 4 or traj.shape[3] != 2:
            raise ValueError(f"trajectories must be (n, m, H, 2), got {traj.shape}")
        if traj.shape[1] < 1:
            raise ValueError("need at least one sample")
        m = traj.shape[1]
        w = np.full(m, 1.0 / m) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (m,) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("weights must be m non-negative numbers summing to 1")
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def m(self) -> int:
        return self.trajectories.shape[1]

    @property
    def horizon(self) -> int:
        return self.trajectories.shape[2]


def _empty(tracks: ObservedTracks, m: int, H: int) -> PredictionSet:
    return PredictionSet(np.zeros((0, m, H, 2)))


def predict_cvm(tracks: ObservedTracks, H: int) -> PredictionSet:
    """Constant velocity from the last two observations."""
    if tracks.n == 0:
        return _empty(tracks, 1, H)
    last = tracks.positions[:, -1]
    step = last - tracks.positions[:, -2]
    ahead = np.arange(1, H + 1, dtype=float)
    traj = last[:, None, :] + ahead[None, :, None] * step[:, None, :]
    return PredictionSet(traj[:, None])


def predict_linear(tracks: ObservedTracks, H: int) -> PredictionSet:
    """Least-squares line per coordinate over all k observations, extrapolated H steps."""
    if tracks.n == 0:
        return _empty(tracks, 1, H)
    k = tracks.k
    # centred step index keeps the fit translation-exact
    t = np.arange(k, dtype=float) - (k - 1) / 2.0
    mean = tracks.positions.mean(axis=1)
    slope = np.einsum("k,nkd->nd", t, tracks.positions - mean[:, None]) / np.dot(t, t)
    future = (k - 1) / 2.0 + np.arange(1, H + 1, dtype=float)
    traj = mean[:, None, :] + future[None, :, None] * slope[:, None, :]
    return PredictionSet(traj[:, None])


@dataclass(frozen=True)
class SamplerConfig:
    heading_std: float = 0.25
    speed_std: float = 0.15
    repulsion: bool = False
    repulsion_radius: float = 0.6


def predict_multimodal(
    tracks: ObservedTracks, H: int, m: int, seed, cfg: SamplerConfig = SamplerConfig()
) -> PredictionSet:
    """Constant-velocity anchor plus m-1 straight-line samples with jittered heading and speed.

    With ``cfg.repulsion`` the samples of pedestrians predicted to come closer
    than ``repulsion_radius`` are pushed apart symmetrically at each step.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if tracks.n == 0:
        return _empty(tracks, m, H)
    rng = np.random.default_rng(seed)
    last = tracks.positions[:, -1]
    step = last - tracks.positions[:, -2]  # displacement per dt
    speed = np.hypot(step[:, 0], step[:, 1])
    heading = np.arctan2(step[:, 1], step[:, 0])
    n = tracks.n
    d_heading = rng.normal(0.0, 1.0, size=(n, m - 1)) * cfg.heading_std
    d_speed = rng.normal(0.0, 1.0, size=(n, m - 1)) * (cfg.speed_std * tracks.dt)
    # a standing pedestrian has no heading to jitter; draw one uniformly
    free = rng.uniform(-math.pi, math.pi, size=(n, m - 1))
    still = speed < 1e-12
    sample_heading = np.where(still[:, None], free, heading[:, None] + d_heading)
    sample_speed = np.maximum(speed[:, None] + d_speed, 0.0)
    sample_step = np.stack([np.cos(sample_heading), np.sin(sample_heading)], axis=-1) * sample_speed[..., None]
    steps = np.concatenate([step[:, None, :], sample_step], axis=1)  # (n, m, 2)
    ahead = np.arange(1, H + 1, dtype=float)
    traj = last[:, None, None, :] + ahead[None, None, :, None] * steps[:, :, None, :]
    if cfg.repulsion and n > 1:
        traj = _repel(traj, cfg.repulsion_radius)
    return PredictionSet(traj)


def _repel(traj: np.ndarray, radius: float) -> np.ndarray:
    traj = traj.copy()
    n, m, H, _ = traj.shape
    iu, ju = np.triu_indices(n, 1)
    for h in range(H):
        p = traj[:, :, h]  # (n, m, 2)
        diff = p[iu] - p[ju]  # (pairs, m, 2)
        dist = np.hypot(diff[..., 0], diff[..., 1])
        deficit = np.clip(radius - dist, 0.0, None)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[..., None] > 1e-12, diff / dist[..., None], 0.0)
        push = 0.5 * deficit[..., None] * unit
        shift = np.zeros_like(p)
        np.add.at(shift, iu, push)
        np.add.at(shift, ju, -push)
        # the displacement carries forward to later steps of the same sample
        traj[:, :, h:] += shift[:, :, None, :]
    return traj


def encode_request(tracks: ObservedTracks, H: int, m: int) -> str:
    return json.dumps(
        {"v": PROTOCOL_VERSION, "dt": tracks.dt, "horizon": H, "samples": m, "tracks": tracks.positions.tolist()},
        separators=(",", ":"),
    )


def decode_response(line: str, n: int, m: int, H: int) -> PredictionSet:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise PredictorProtocolError(f"response is not JSON: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("v") != PROTOCOL_VERSION or "preds" not in msg:
        raise PredictorProtocolError("response missing version or preds")
    try:
        preds = np.asarray(msg["preds"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise PredictorProtocolError(f"preds is not a numeric array: {exc}") from exc
    if n == 0 and preds.size == 0:
        return PredictionSet(np.zeros((0, m, H, 2)))
    if preds.shape != (n, m, H, 2):
        raise PredictorProtocolError(f"expected preds of shape {(n, m, H, 2)}, got {preds.shape}")
    if not np.all(np.isfinite(preds)):
        raise PredictorProtocolError("preds contain non-finite values")
    return PredictionSet(preds)


def handle_request(line: str, fn=None) -> str:
    """Answer one protocol request; ``fn(tracks, H, m)`` defaults to CVM repeated m times.

    Used by the bundled reference server and by tests.
    """
    msg = json.loads(line)
    tracks = ObservedTracks(np.asarray(msg["tracks"], dtype=float).reshape(len(msg["tracks"]), -1, 2), msg["dt"])
    H, m = int(msg["horizon"]), int(msg["samples"])
    if fn is None:
        cvm = predict_cvm(tracks, H).trajectories
        preds = np.repeat(cvm, m, axis=1)
    else:
        preds = fn(tracks, H, m).trajectories
    return json.dumps({"v": PROTOCOL_VERSION, "preds": preds.tolist()}, separators=(",", ":"))


class ExternalPredictor:
    """Client for a predictor served out of process.

    ``endpoint`` is either ``"tcp://host:port"`` or a command list that is
    started as a subprocess and spoken to over stdin/stdout. One request line
    out, one response line back.
    """

    def __init__(self, endpoint, timeout: float = 2.0):
        self.timeout = timeout
        self._proc = None
        self._sock = None
        self._buf = b""
        if isinstance(endpoint, str) and endpoint.startswith("tcp://"):
            host, port = endpoint[len("tcp://"):].rsplit(":", 1)
            try:
                self._sock = socket.create_connection((host, int(port)), timeout=timeout)
            except socket.timeout as exc:
                raise PredictorTimeout(f"connect to {endpoint} timed out") from exc
            except OSError as exc:
                raise PredictorError(f"cannot reach {endpoint}: {exc}") from exc
        else:
            cmd = shlex.split(endpoint) if isinstance(endpoint, str) else list(endpoint)
            self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0)

    def _send(self, data: bytes):
        try:
            if self._sock is not None:
                self._sock.sendall(data)
            else:
                self._proc.stdin.write(data)
                self._proc.stdin.flush()
        except OSError as exc:
            raise PredictorError(f"send failed: {exc}") from exc

    def _readline(self) -> bytes:
        deadline = time.monotonic() + self.timeout
        sel = selectors.DefaultSelector()
        src = self._sock if self._sock is not None else self._proc.stdout
        sel.register(src, selectors.EVENT_READ)
        try:
            while b"\n" not in self._buf:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    raise PredictorTimeout(f"no response within {self.timeout} s")
                chunk = self._sock.recv(65536) if self._sock is not None else os.read(self._proc.stdout.fileno(), 65536)
                if not chunk:
                    raise PredictorProtocolError("predictor closed the connection")
                self._buf += chunk
        finally:
            sel.close()
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def predict(self, tracks: ObservedTracks, H: int, m: int) -> PredictionSet:
        self._send((encode_request(tracks, H, m) + "\n").encode("utf-8"))
        raw = self._readline()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PredictorProtocolError("response is not UTF-8") from exc
        return decode_response(text, tracks.n, m, H)

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def predict_external(tracks: ObservedTracks, H: int, m: int, endpoint, timeout: float = 2.0) -> PredictionSet:
    """One-shot convenience wrapper; long runs should keep an :class:`ExternalPredictor` open."""
    with ExternalPredictor(endpoint, timeout) as client:
        return client.predict(tracks, H, m)


def serve_stdio(fn=None):
    """Reference server loop: answer requests from stdin until EOF."""
    import sys

    for line in sys.stdin:
        if line.strip():
            sys.stdout.write(handle_request(line, fn) + "\n")
            sys.stdout.flush()


@dataclass
class PredictorSpec:
    """Which back-end a policy uses and with what sizes."""

    kind: str = "multimodal"  # cvm | linear | multimodal | external
    horizon: int = 8
    num_samples: int = 20
    obs_len: int = 8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    endpoint: str | None = None
    timeout: float = 2.0


class Predictor:
    """Stateful wrapper bound to one environment instance (owns the RNG or connection)."""

    def __init__(self, spec: PredictorSpec, seed: int = 0):
        if spec.kind not in ("cvm", "linear", "multimodal", "external"):
            raise ValueError(f"unknown predictor kind {spec.kind!r}")
        self.spec = spec
        self._rng = np.random.default_rng(seed)
        self._client = None
        if spec.kind == "external":
            if not spec.endpoint:
                raise ValueError("external predictor needs an endpoint")
            self._client = ExternalPredictor(spec.endpoint, spec.timeout)

    def __call__(self, tracks: ObservedTracks, H: int | None = None) -> PredictionSet:
        H = self.spec.horizon if H is None else H
        kind = self.spec.kind
        if kind == "cvm":
            return predict_cvm(tracks, H)
        if kind == "linear":
            return predict_linear(tracks, H)
        if kind == "multimodal":
            seed = int(self._rng.integers(2**63))
            return predict_multimodal(tracks, H, self.spec.num_samples, seed, self.spec.sampler)
        return self._client.predict(tracks, H, self.spec.num_samples)

    def close(self):
        if self._client is not None:
            self._client.close()
