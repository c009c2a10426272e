"""Socially attentive state-value network in plain numpy.

Each vehicle-pedestrian pair is embedded by an MLP, scored by an attention MLP
that also sees the crowd's mean embedding, and the softmax-weighted pair
features form a crowd vector. The value head reads the vehicle's own state
together with that crowd vector. Gradients are hand-derived.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import PED_DIM, SELF_DIM, EgoBatch, EgoJointState

FORMAT = "crowdkce-valuenet"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ValueNetConfig:
    embed_dims: tuple[int, ...] = (150, 100)
    feature_dims: tuple[int, ...] = (100, 50)
    attention_dims: tuple[int, ...] = (100, 100, 1)
    value_dims: tuple[int, ...] = (150, 100, 100, 1)

    def __post_init__(self):
        for name in ("embed_dims", "feature_dims", "attention_dims", "value_dims"):
            dims = tuple(int(d) for d in getattr(self, name))
            if not dims or min(dims) < 1:
                raise ValueError(f"{name} must be a non-empty tuple of positive sizes")
            object.__setattr__(self, name, dims)
        if self.attention_dims[-1] != 1 or self.value_dims[-1] != 1:
            raise ValueError("attention and value heads must end in a single unit")

    def layer_shapes(self) -> dict[str, tuple[tuple[int, int], ...]]:
        def chain(n_in, dims):
            shapes = []
            for d in dims:
                shapes.append((n_in, d))
                n_in = d
            return tuple(shapes)

        e = self.embed_dims[-1]
        return {
            "embed": chain(SELF_DIM + PED_DIM, self.embed_dims),
            "feature": chain(e, self.feature_dims),
            "attention": chain(2 * e, self.attention_dims),
            "value": chain(SELF_DIM + self.feature_dims[-1], self.value_dims),
        }


# last layer gets a ReLU in the two embedding stacks only
_LAST_RELU = {"embed": True, "feature": False, "attention": False, "value": False}


def init_params(cfg: ValueNetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, small random placeholder crowd vector."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for block, shapes in cfg.layer_shapes().items():
        for i, (n_in, n_out) in enumerate(shapes):
            bound = 1.0 / math.sqrt(n_in)
            params[f"{block}.{i}.W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
            params[f"{block}.{i}.b"] = np.zeros(n_out)
    params["placeholder"] = rng.normal(0.0, 0.1, size=cfg.feature_dims[-1])
    return params


def _mlp_forward(params, block, n_layers, x):
    cache = []
    h = x
    for i in range(n_layers):
        z = h @ params[f"{block}.{i}.W"] + params[f"{block}.{i}.b"]
        cache.append(h)
        relu = i < n_layers - 1 or _LAST_RELU[block]
        h = np.maximum(z, 0.0) if relu else z
        cache.append(relu)
    return h, cache


def _mlp_backward(params, block, n_layers, cache, out, dout, grads):
    dh = dout
    h_next = out
    for i in reversed(range(n_layers)):
        h_in, relu = cache[2 * i], cache[2 * i + 1]
        if relu:
            dh = dh * (h_next > 0)
        grads[f"{block}.{i}.W"] = h_in.T @ dh
        grads[f"{block}.{i}.b"] = dh.sum(axis=0)
        dh = dh @ params[f"{block}.{i}.W"].T
        h_next = h_in
    return dh


def _masked_softmax(scores, mask):
    s = np.where(mask, scores, -np.inf)
    top = np.max(s, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(s - top), 0.0)
    total = e.sum(axis=1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def softmax_backward(w, dw):
    """Vector-Jacobian product of the row softmax: scores gradient from weights gradient."""
    return w * (dw - np.sum(w * dw, axis=1, keepdims=True))


def forward(params, cfg: ValueNetConfig, batch: EgoBatch, keep_cache: bool = False):
    S, P, M = batch.self_state, batch.peds, batch.mask
    B, n = M.shape
    L = cfg.layer_shapes()
    cache = {}
    if n:
        X = np.concatenate([np.broadcast_to(S[:, None, :], (B, n, SELF_DIM)), P], axis=2).reshape(B * n, -1)
        E, c_embed = _mlp_forward(params, "embed", len(L["embed"]), X)
        d_e = E.shape[1]
        E3 = E.reshape(B, n, d_e)
        count = M.sum(axis=1)
        g = (E3 * M[..., None]).sum(axis=1) / np.maximum(count, 1)[:, None]
        F, c_feat = _mlp_forward(params, "feature", len(L["feature"]), E)
        F3 = F.reshape(B, n, -1)
        A_in = np.concatenate([E3, np.broadcast_to(g[:, None, :], E3.shape)], axis=2).reshape(B * n, -1)
        s, c_att = _mlp_forward(params, "attention", len(L["attention"]), A_in)
        w = _masked_softmax(s.reshape(B, n), M)
        empty = count == 0
        crowd = np.einsum("bn,bnd->bd", w, F3)
        crowd[empty] = params["placeholder"]
        cache.update(E=E, F=F, s=s, w=w, count=count, empty=empty, c_embed=c_embed, c_feat=c_feat, c_att=c_att)
    else:
        crowd = np.broadcast_to(params["placeholder"], (B, cfg.feature_dims[-1])).copy()
        cache.update(empty=np.ones(B, dtype=bool))
    V_in = np.concatenate([S, crowd], axis=1)
    V, c_val = _mlp_forward(params, "value", len(L["value"]), V_in)
    cache["c_val"] = c_val
    cache["V"] = V
    out = V[:, 0]
    return (out, cache) if keep_cache else out


def backward(params, cfg: ValueNetConfig, batch: EgoBatch, cache, dvalue) -> dict[str, np.ndarray]:
    """Gradient of ``sum(dvalue * value)`` with respect to every parameter."""
    M = batch.mask
    B, n = M.shape
    L = cfg.layer_shapes()
    grads: dict[str, np.ndarray] = {}
    dV_in = _mlp_backward(params, "value", len(L["value"]), cache["c_val"], cache["V"], dvalue[:, None], grads)
    dcrowd = dV_in[:, SELF_DIM:]
    empty = cache["empty"]
    grads["placeholder"] = dcrowd[empty].sum(axis=0)
    if not n:
        for block in ("embed", "feature", "attention"):
            for i, (a, b) in enumerate(L[block]):
                grads[f"{block}.{i}.W"] = np.zeros((a, b))
                grads[f"{block}.{i}.b"] = np.zeros(b)
        return grads
    dcrowd = np.where(empty[:, None], 0.0, dcrowd)
    w, E, F = cache["w"], cache["E"], cache["F"]
    d_e = E.shape[1]
    F3 = F.reshape(B, n, -1)
    dF3 = w[..., None] * dcrowd[:, None, :]
    dw = np.einsum("bnd,bd->bn", F3, dcrowd)
    ds = softmax_backward(w, dw)
    dA_in = _mlp_backward(params, "attention", len(L["attention"]), cache["c_att"], cache["s"], ds.reshape(B * n, 1), grads)
    dA3 = dA_in.reshape(B, n, 2 * d_e)
    dE3 = dA3[..., :d_e].copy()
    dg = dA3[..., d_e:].sum(axis=1)
    dE3 += M[..., None] * (dg / np.maximum(cache["count"], 1)[:, None])[:, None, :]
    dE_feat = _mlp_backward(params, "feature", len(L["feature"]), cache["c_feat"], F, dF3.reshape(B * n, -1), grads)
    dE = dE3.reshape(B * n, d_e) + dE_feat
    _mlp_backward(params, "embed", len(L["embed"]), cache["c_embed"], E, dE, grads)
    return grads


def mse_loss(params, cfg, batch: EgoBatch, targets) -> float:
    v = forward(params, cfg, batch)
    return float(np.mean((v - targets) ** 2))


def gradient(params, cfg: ValueNetConfig, batch: EgoBatch, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared-error loss and its gradient over a non-empty batch."""
    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    targets = np.asarray(targets, dtype=float)
    v, cache = forward(params, cfg, batch, keep_cache=True)
    err = v - targets
    loss = float(np.mean(err**2))
    grads = backward(params, cfg, batch, cache, 2.0 * err / len(err))
    return loss, grads


def attention_weights(ego: EgoJointState | EgoBatch, params, cfg: ValueNetConfig) -> np.ndarray:
    batch = ego.as_batch() if isinstance(ego, EgoJointState) else ego
    if batch.peds.shape[1] == 0:
        raise ValueError("attention weights need at least one pedestrian")
    _, cache = forward(params, cfg, batch, keep_cache=True)
    w = cache["w"]
    return w[0] if isinstance(ego, EgoJointState) else w


def value_forward(ego: EgoJointState | EgoBatch, params, cfg: ValueNetConfig):
    if isinstance(ego, EgoJointState):
        return float(forward(params, cfg, ego.as_batch())[0])
    return forward(params, cfg, ego)


class ValueNetwork:
    """Parameters plus architecture, callable on an :class:`EgoBatch`."""

    def __init__(self, cfg: ValueNetConfig = ValueNetConfig(), params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    def __call__(self, batch: EgoBatch) -> np.ndarray:
        return forward(self.params, self.cfg, batch)

    def copy(self) -> "ValueNetwork":
        return ValueNetwork(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def save(self, path) -> None:
        save_params(path, self.params, self.cfg)

    @classmethod
    def load(cls, path) -> "ValueNetwork":
        params, cfg = load_params(path)
        return cls(cfg, params)


def save_params(path, params: dict[str, np.ndarray], cfg: ValueNetConfig, extra: dict | None = None) -> None:
    """JSON with one entry per array: name, shape, row-major values."""
    doc = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": asdict(cfg),
        "layers": [
            {"name": k, "shape": list(v.shape), "values": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in params.items()
        ],
    }
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[dict[str, np.ndarray], ValueNetConfig]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path} is not a version-{FORMAT_VERSION} value-network file")
    cfg = ValueNetConfig(**{k: tuple(v) for k, v in doc["config"].items()})
    params = {}
    for layer in doc["layers"]:
        params[layer["name"]] = np.array(layer["values"], dtype=float).reshape(layer["shape"])
    expected = init_params(cfg)
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise ValueError(f"parameter {k} missing or mis-shaped in {path}")
    return params, cfg


def analytic_value(batch: EgoBatch | EgoJointState, proximity: float = 0.5, weight: float = 2.0):
    """Training-free value: minus goal distance, minus a quadratic penalty for close pedestrians."""
    single = isinstance(batch, EgoJointState)
    if single:
        batch = batch.as_batch()
    dg = batch.self_state[:, 0]
    gap = batch.peds[..., 5] - batch.peds[..., 6]
    penalty = np.where(batch.mask, np.clip(proximity - gap, 0.0, None) ** 2, 0.0).sum(axis=1)
    v = -dg - weight * penalty
    return float(v[0]) if single else v


class ReplayBuffer:
    """Fixed-capacity FIFO of (ego state, target value) pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[tuple[np.ndarray, np.ndarray, float]] = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.items)

    def push(self, batch: EgoBatch, targets: Sequence[float]) -> None:
        for i in range(len(batch)):
            item = (batch.self_state[i], batch.peds[i][batch.mask[i]], float(targets[i]))
            if len(self.items) < self.capacity:
                self.items.append(item)
            else:
                self.items[self.cursor] = item
            self.cursor = (self.cursor + 1) % self.capacity

    def batch(self, idx) -> tuple[EgoBatch, np.ndarray]:
        chosen = [self.items[i] for i in idx]
        n = max((len(p) for _, p, _ in chosen), default=0)
        S = np.stack([s for s, _, _ in chosen])
        P = np.zeros((len(chosen), n, PED_DIM))
        M = np.zeros((len(chosen), n), dtype=bool)
        for j, (_, p, _) in enumerate(chosen):
            P[j, : len(p)] = p
            M[j, : len(p)] = True
        return EgoBatch(S, P, M), np.array([t for _, _, t in chosen])

    def sample(self, rng: np.random.Generator, size: int) -> tuple[EgoBatch, np.ndarray]:
        return self.batch(rng.integers(0, len(self.items), size=min(size, len(self.items))))


@dataclass
class SGDMomentum:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            v = self.velocity.get(k)
            v = -self.lr * g if v is None else self.momentum * v - self.lr * g
            self.velocity[k] = v
            params[k] += v
