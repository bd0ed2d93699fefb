"""Small feed-forward networks with hand-written backpropagation and Adam."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .domain import sigmoid

ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "bounded")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths including input and output, e.g. ``(4, 8, 3)``.

    The ``bounded`` head squashes outputs through a sigmoid into (0, 1),
    which the calibrator maps onto the parameter box.
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    head: str = "linear"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("need input, at least one hidden layer, and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")

    def to_dict(self):
        return {"widths": list(self.widths), "activation": self.activation, "head": self.head, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), d["activation"], d["head"], int(d["seed"]))


@dataclass
class NetworkWeights:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetworkWeights":
        return NetworkWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays) -> "NetworkWeights":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2])

    def check(self, spec: NetworkSpec) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (spec.widths[i], spec.widths[i + 1]) or b.shape != (spec.widths[i + 1],):
                raise ValueError(f"layer {i}: weight shapes do not match {spec.widths}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite weights")


def init_weights(spec: NetworkSpec) -> NetworkWeights:
    """Glorot-uniform weights, zero biases, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return NetworkWeights(ws, bs)


def _act(x, name):
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


def _act_grad(pre, post, name):
    return 1.0 - post * post if name == "tanh" else (pre > 0).astype(float)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations
    output: np.ndarray | None = None


def forward(spec: NetworkSpec, weights: NetworkWeights, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; ``x`` is ``(batch, in)`` or ``(in,)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[1]} != {spec.widths[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    cache = ForwardCache()
    h = x
    n = len(weights.weights)
    for i, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        if i < n - 1:
            h = _act(z, spec.activation)
        else:
            h = sigmoid(z) if spec.head == "bounded" else z
    cache.output = h
    return (h[0] if single else h), cache


def backward(spec: NetworkSpec, weights: NetworkWeights, cache: ForwardCache, grad_out: np.ndarray
             ) -> tuple[NetworkWeights, np.ndarray]:
    """Gradients of a scalar loss given ``dL/d output``; returns (weight grads, dL/d input)."""
    g = np.asarray(grad_out, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ValueError(f"output gradient shape {g.shape} != {cache.output.shape}")
    n = len(weights.weights)
    gw, gb = [None] * n, [None] * n
    if spec.head == "bounded":
        y = cache.output
        g = g * y * (1.0 - y)
    for i in range(n - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ weights.weights[i].T
        if i > 0:
            g = g * _act_grad(cache.pre[i - 1], cache.inputs[i], spec.activation)
    return NetworkWeights(gw, gb), g


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                              None if self.m is None else [a.copy() for a in self.m],
                              None if self.v is None else [a.copy() for a in self.v])


def adam_step(weights: NetworkWeights, grads: NetworkWeights, state: OptimizerState
              ) -> tuple[NetworkWeights, OptimizerState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    params, gl = weights.arrays(), grads.arrays()
    for i, g in enumerate(gl):
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient: {bad} entries in parameter array {i}, step {state.step}")
    m = state.m if state.m is not None else [np.zeros_like(p) for p in params]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in params]
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, gl, m, v):
        mi = state.beta1 * mi + (1.0 - state.beta1) * g
        vi = state.beta2 * vi + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (mi / bc1) / (np.sqrt(vi / bc2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    return (NetworkWeights.from_arrays(new_p),
            OptimizerState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v))


# -- checkpoint container ------------------------------------------------------------

def save_container(path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    """npz with a JSON metadata entry, written to a temp file then renamed."""
    path = Path(path)
    payload = dict(arrays)
    meta = dict(meta, version=CHECKPOINT_VERSION)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_container(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays
