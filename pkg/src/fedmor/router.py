"""Routing network: local multi-label BCE training and weighted averaging."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ContractError,
    GradResult,
    MlpSpec,
    Optimizer,
    backward,
    forward,
    init_params,
    sigmoid,
    softmax,
)
from .synthdata import Encoder, PreferencePair, encode

CHECKPOINT_FORMAT = "fedmor-router/1"


@dataclass
class Router:
    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    @property
    def num_clients(self) -> int:
        return self.spec.output_dim

    def copy(self) -> "Router":
        return Router(self.spec, self.params.copy())


@dataclass(frozen=True)
class RouterConfig:
    hidden_dims: tuple[int, ...] = (16,)
    rounds: int = 20
    local_steps: int = 50
    lr: float = 0.01
    batch: int = 64
    participation: float = 1.0


@dataclass
class RouterUpdate:
    client_id: int
    params: np.ndarray = field(repr=False)
    sample_count: int

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ContractError("sample_count must be positive")


def new_router(d_h: int, num_clients: int, hidden_dims, rng) -> Router:
    spec = MlpSpec(d_h, tuple(hidden_dims), num_clients, "tanh")
    return Router(spec, init_params(spec, rng))


def route_logits(router: Router, enc: Encoder, x, y) -> np.ndarray:
    h = encode(enc, x, y)
    if h.shape[-1] != router.spec.input_dim:
        raise ContractError(f"encoder output {h.shape[-1]} != router input {router.spec.input_dim}")
    return forward(router.spec, router.params, h)


def routing_weights(router: Router, enc: Encoder, x, y) -> np.ndarray:
    return softmax(route_logits(router, enc, x, y))


def bce_with_logits(z, target) -> np.ndarray:
    """Elementwise -[t log sigmoid(z) + (1 - t) log sigmoid(-z)], stable form."""
    return np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))


def _bce_loss_and_grad(spec, params, H, target):
    """Mean over rows and coordinates of BCE(logits(H), target)."""
    z = forward(spec, params, H)
    loss = float(np.mean(bce_with_logits(z, target)))
    up = (sigmoid(z) - target) / z.size
    return loss, backward(spec, params, H, up)


def router_local_loss(router: Router, enc: Encoder, pair: PreferencePair) -> GradResult:
    """Half the sum of chosen- and rejected-response BCE against one-hot e_origin.

    Each response's BCE is averaged over the K logit coordinates; batched
    pairs are averaged.
    """
    K = router.num_clients
    if not 0 <= pair.origin < K:
        raise ContractError(f"pair origin {pair.origin} out of range for K={K}")
    x = np.atleast_2d(pair.context)
    H = np.concatenate([encode(enc, x, np.atleast_2d(pair.chosen)),
                        encode(enc, x, np.atleast_2d(pair.rejected))])
    target = np.zeros((len(H), K))
    target[:, pair.origin] = 1.0
    # mean over the 2n responses == mean over pairs of (l+ + l-) / 2
    return GradResult(*_bce_loss_and_grad(router.spec, router.params, H, target))


def local_router_train(router: Router, enc: Encoder, client_pairs: PreferencePair,
                       config: RouterConfig, rng) -> RouterUpdate:
    """Run ``config.local_steps`` minibatch steps from the broadcast router."""
    n = len(client_pairs)
    if n == 0:
        raise ContractError("local router training needs at least one pair")
    origins = np.atleast_1d(client_pairs.origin)
    if len(np.unique(origins)) != 1:
        raise ContractError("local router batch mixes pairs from different clients")
    k = int(origins[0])
    K = router.num_clients
    if not 0 <= k < K:
        raise ContractError(f"pair origin {k} out of range for K={K}")
    x = np.atleast_2d(client_pairs.context)
    H_all = np.concatenate([encode(enc, x, np.atleast_2d(client_pairs.chosen)),
                            encode(enc, x, np.atleast_2d(client_pairs.rejected))])
    params = router.params.copy()
    opt = Optimizer("adam", config.lr)
    for _ in range(config.local_steps):
        idx = rng.choice(n, size=min(config.batch, n), replace=False)
        H = np.concatenate([H_all[idx], H_all[n + idx]])
        target = np.zeros((len(H), K))
        target[:, k] = 1.0
        _, grad = _bce_loss_and_grad(router.spec, params, H, target)
        params = opt.step(params, grad)
    return RouterUpdate(k, params, n)


def aggregate(updates: list[RouterUpdate]) -> np.ndarray:
    """Sample-count weighted mean, summed in ascending client-id order."""
    if not updates:
        raise ContractError("cannot aggregate an empty participant set")
    ordered = sorted(updates, key=lambda u: u.client_id)
    size = ordered[0].params.shape
    if any(u.params.shape != size for u in ordered):
        raise ContractError("router updates have inconsistent layouts")
    total = sum(u.sample_count for u in ordered)
    out = np.zeros(size)
    for u in ordered:
        out = out + (u.sample_count / total) * u.params
    return out


def routing_accuracy(router: Router, enc: Encoder, pairs_by_client: list[PreferencePair]) -> float:
    """Fraction of responses whose argmax routing weight equals the pair origin."""
    hits = total = 0
    for pairs in pairs_by_client:
        for y in (pairs.chosen, pairs.rejected):
            z = route_logits(router, enc, np.atleast_2d(pairs.context), np.atleast_2d(y))
            hits += int(np.sum(np.argmax(z, axis=1) == pairs.origin))
            total += len(z)
    return hits / total


def checkpoint_to_json(router: Router) -> str:
    return json.dumps({"format": CHECKPOINT_FORMAT, "spec": router.spec.to_dict(),
                       "params": router.params.tolist()})


def checkpoint_from_json(text: str) -> Router:
    d = json.loads(text)
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported router checkpoint {d.get('format')!r}")
    return Router(MlpSpec.from_dict(d["spec"]), np.array(d["params"], dtype=np.float64))
