"""Small differentiable building blocks shared by every learner.

Parameters are flat float64 arrays; an :class:`MlpSpec` describes how the
flat vector maps onto per-layer weight matrices and bias vectors.  Networks
accept a single input vector or a batch (rows are examples).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class ContractError(ValueError):
    """Raised when an operation is called with inconsistent shapes or state."""


class TrainingDiverged(RuntimeError):
    """A trainer produced a non-finite loss or gradient, or exploding parameters."""

    def __init__(self, what: str, step: int, loss: float):
        super().__init__(f"{what} diverged at step {step} (loss={loss})")
        self.what = what
        self.step = step
        self.loss = loss


# parameters beyond this magnitude count as a blow-up even while still finite
PARAM_LIMIT = 1e12


def params_blown_up(params: np.ndarray) -> bool:
    return not np.all(np.isfinite(params)) or float(np.max(np.abs(params), initial=0.0)) > PARAM_LIMIT


class GradResult(NamedTuple):
    loss: float
    grad: np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ContractError(f"all layer dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def layout(self) -> list[tuple[tuple[int, int], int]]:
        """Per layer: ((fan_out, fan_in), bias length), in storage order."""
        d = self.dims
        return [((d[i + 1], d[i]), d[i + 1]) for i in range(len(d) - 1)]

    @property
    def num_params(self) -> int:
        d = self.dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["output_dim"]), d["activation"])


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into ``params`` for each layer."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ContractError(
            f"params length {params.shape} does not match spec ({spec.num_params})"
        )
    layers = []
    off = 0
    for (fo, fi), nb in spec.layout():
        W = params[off:off + fo * fi].reshape(fo, fi)
        off += fo * fi
        b = params[off:off + nb]
        off += nb
        layers.append((W, b))
    return layers


def head_slice(spec: MlpSpec) -> slice:
    """Index range of the final linear layer (weights then bias)."""
    (fo, fi), nb = spec.layout()[-1]
    return slice(spec.num_params - fo * fi - nb, spec.num_params)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Scaled uniform init for weights, zero biases."""
    parts = []
    for (fo, fi), nb in spec.layout():
        a = math.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-a, a, size=fo * fi))
        parts.append(np.zeros(nb))
    return np.concatenate(parts)


def _act(name, a):
    return np.tanh(a) if name == "tanh" else np.maximum(a, 0.0)


def _act_grad(name, a, h):
    return 1.0 - h * h if name == "tanh" else (a > 0).astype(np.float64)


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ContractError(f"input shape {x.shape} incompatible with input_dim={spec.input_dim}")
    return X, single


def _forward_cache(spec, params, X):
    layers = unpack(spec, params)
    pre, acts = [], [X]
    h = X
    for i, (W, b) in enumerate(layers):
        a = h @ W.T + b
        pre.append(a)
        h = a if i == len(layers) - 1 else _act(spec.activation, a)
        acts.append(h)
    return layers, pre, acts


def forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    X, single = _as_batch(spec, x)
    _, _, acts = _forward_cache(spec, params, X)
    return acts[-1][0] if single else acts[-1]


def features(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Activations feeding the final linear layer (the input itself if there is no hidden layer)."""
    X, single = _as_batch(spec, x)
    _, _, acts = _forward_cache(spec, params, X)
    return acts[-2][0] if single else acts[-2]


def backward(spec: MlpSpec, params: np.ndarray, x, upstream_grad) -> np.ndarray:
    """Vector-Jacobian product: d(sum(upstream * forward(x))) / d(params).

    For a batch input, ``upstream_grad`` has one row per example and the
    per-example gradients are summed.
    """
    X, single = _as_batch(spec, x)
    G = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        G = G[None, :]
    if G.shape != (X.shape[0], spec.output_dim):
        raise ContractError(f"upstream_grad shape {G.shape} != {(X.shape[0], spec.output_dim)}")
    layers, pre, acts = _forward_cache(spec, params, X)
    grads = []
    delta = G
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W) * _act_grad(spec.activation, pre[i - 1], acts[i])
    out = []
    for gW, gb in reversed(grads):
        out.append(gW.ravel())
        out.append(gb)
    return np.concatenate(out)


def stable_log_sigmoid(z):
    """log(1 / (1 + exp(-z))) without overflow."""
    z = np.asarray(z, dtype=np.float64)
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ContractError("softmax of an empty vector")
    s = z - z.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _check_layout(params, grad):
    if np.shape(params) != np.shape(grad):
        raise ContractError(f"layout mismatch: params {np.shape(params)} vs grad {np.shape(grad)}")


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    _check_layout(params, grad)
    return params - lr * grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` moments in place."""
    _check_layout(params, grad)
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ContractError("optimizer state layout does not match params")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Optimizer:
    """Thin wrapper so trainers can switch between sgd and adam by name."""

    def __init__(self, kind: str = "adam", lr: float = 1e-3):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.state = AdamState(lr=lr) if kind == "adam" else None

    def step(self, params, grad):
        if self.kind == "sgd":
            return sgd_step(params, grad, self.lr)
        return adam_step(params, grad, self.state)


def stream(seed: int, name: str) -> np.random.Generator:
    """Named PCG64 stream derived from (seed, name); independent of call order."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *words])))


def finite_difference(f, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``params``."""
    params = np.array(params, dtype=np.float64)
    g = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + step
        fp = f(params)
        params[i] = old - step
        fm = f(params)
        params[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
