"""Synthetic heterogeneous clients, public queries and the frozen encoder.

Each client k has a bilinear utility u_k(x, y) = y^T A_k x over contexts x
and codebook responses y.  Preference pairs are labelled with the
Bradley-Terry model at temperature tau, so the chosen response is the
higher-utility one with probability sigmoid(|du| / tau).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ContractError, sigmoid, stream

WORLD_FORMAT = "fedmor-world/1"
HETEROGENEITY = ("region", "criterion")


@dataclass(frozen=True)
class WorldSpec:
    num_clients: int = 3
    context_dim: int = 8
    response_dim: int = 8
    encoder_dim: int = 16
    codebook_size: int = 64
    pairs_per_client: int = 2000
    public_query_count: int = 300
    preference_temperature: float = 0.5
    heterogeneity: str = "region"
    center_separation: float = 5.0
    context_spread: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        errors = []
        if self.num_clients < 2:
            errors.append("num_clients must be >= 2")
        if self.codebook_size < 2:
            errors.append("codebook_size must be >= 2")
        if not self.preference_temperature > 0:
            errors.append("preference_temperature must be > 0")
        if self.heterogeneity not in HETEROGENEITY:
            errors.append(f"heterogeneity must be one of {HETEROGENEITY}")
        for name in ("context_dim", "response_dim", "encoder_dim", "pairs_per_client",
                     "public_query_count"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if self.center_separation < 0 or self.context_spread < 0:
            errors.append("center_separation and context_spread must be nonnegative")
        if errors:
            raise ContractError("invalid WorldSpec: " + "; ".join(errors))


@dataclass
class PreferencePair:
    """(context, chosen, rejected) from one client.

    Fields may carry a leading batch axis; every row then shares ``origin``.
    """
    context: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray
    origin: int

    def __len__(self):
        return 1 if np.ndim(self.context) == 1 else len(self.context)

    def subset(self, idx) -> "PreferencePair":
        return PreferencePair(self.context[idx], self.chosen[idx], self.rejected[idx], self.origin)

    def rows(self):
        for i in range(len(self)):
            yield PreferencePair(self.context[i], self.chosen[i], self.rejected[i], self.origin)


@dataclass
class ClientWorld:
    client_id: int
    utility: np.ndarray            # A_k, shape (d_y, d_x)
    center: np.ndarray
    spread: float
    contexts: np.ndarray
    chosen_idx: np.ndarray
    rejected_idx: np.ndarray
    codebook: np.ndarray = field(repr=False)

    def utility_of(self, x, y) -> np.ndarray:
        """u_k(x, y) = y^T A_k x, row-wise for batches."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        return np.einsum("nj,jk,nk->n", y, self.utility, x)

    def utility_table(self, x) -> np.ndarray:
        """u_k(x, y) for every codebook response: shape (n, V)."""
        return np.atleast_2d(x) @ self.utility.T @ self.codebook.T

    @property
    def pairs(self) -> PreferencePair:
        return PreferencePair(self.contexts, self.codebook[self.chosen_idx],
                              self.codebook[self.rejected_idx], self.client_id)

    def __len__(self):
        return len(self.contexts)


@dataclass
class Encoder:
    weight: np.ndarray             # (d_h, d_x + d_y)
    bias: np.ndarray

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class World:
    spec: WorldSpec
    clients: list[ClientWorld]
    public_queries: np.ndarray
    public_origins: np.ndarray
    codebook: np.ndarray
    encoder: Encoder


def encode(enc: Encoder, x, y) -> np.ndarray:
    """h = tanh(W [x; y] + b); accepts single vectors or row batches."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] + y.shape[-1] != enc.weight.shape[1] or x.ndim != y.ndim:
        raise ContractError(f"encoder expects {enc.weight.shape[1]} input dims, got {x.shape} and {y.shape}")
    return np.tanh(np.concatenate([x, y], axis=-1) @ enc.weight.T + enc.bias)


def _centers(spec: WorldSpec, rng) -> np.ndarray:
    K, d = spec.num_clients, spec.context_dim
    if spec.heterogeneity == "criterion":
        return np.zeros((K, d))
    if K <= d:
        # orthonormal directions scaled so every pair sits exactly `center_separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((d, K)))
        return (spec.center_separation / np.sqrt(2.0)) * q.T
    radius = spec.center_separation
    for _ in range(10_000):
        c = rng.standard_normal((K, d))
        c *= radius / np.linalg.norm(c, axis=1, keepdims=True)
        dist = np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(K) * 1e9
        if dist.min() >= spec.center_separation:
            return c
        radius *= 1.01
    raise ContractError("could not place client centers at the requested separation")


def sample_contexts(client: ClientWorld, n: int, rng) -> np.ndarray:
    return client.center + client.spread * rng.standard_normal((n, len(client.center)))


def sample_response_indices(V: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct uniform codebook indices per row."""
    a = rng.integers(0, V, size=n)
    b = (a + rng.integers(1, V, size=n)) % V
    return a, b


def bt_label(client: ClientWorld, contexts, idx_a, idx_b, tau: float, rng):
    """Bradley-Terry labelling: returns (chosen_idx, rejected_idx)."""
    u = client.utility_table(contexts)
    rows = np.arange(len(contexts))
    du = u[rows, idx_a] - u[rows, idx_b]
    p_a = sigmoid(du / tau)
    take_a = rng.random(len(contexts)) < p_a
    return np.where(take_a, idx_a, idx_b), np.where(take_a, idx_b, idx_a)


def sample_client_pairs(client: ClientWorld, n: int, tau: float, rng) -> PreferencePair:
    """Fresh pairs from the client's generative distribution (held-out / non-member data)."""
    x = sample_contexts(client, n, rng)
    a, b = sample_response_indices(len(client.codebook), n, rng)
    c, r = bt_label(client, x, a, b, tau, rng)
    return PreferencePair(x, client.codebook[c], client.codebook[r], client.client_id)


def relabel(client: ClientWorld, tau: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Redraw labels for the client's existing (x, {y_a, y_b}) pairs with a new stream."""
    return bt_label(client, client.contexts, client.chosen_idx, client.rejected_idx, tau, rng)


def generate_world(spec: WorldSpec) -> World:
    spec.validate()
    s = spec.seed
    K, dx, dy = spec.num_clients, spec.context_dim, spec.response_dim
    codebook = stream(s, "world/codebook").standard_normal((spec.codebook_size, dy))
    codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)
    centers = _centers(spec, stream(s, "world/centers"))

    clients = []
    for k in range(K):
        A = stream(s, f"client-{k}/utility").standard_normal((dy, dx))
        client = ClientWorld(k, A, centers[k], spec.context_spread, np.empty((0, dx)),
                             np.empty(0, int), np.empty(0, int), codebook)
        rng = stream(s, f"client-{k}/pairs")
        x = sample_contexts(client, spec.pairs_per_client, rng)
        a, b = sample_response_indices(spec.codebook_size, spec.pairs_per_client, rng)
        client.contexts = x
        client.chosen_idx, client.rejected_idx = a, b
        client.chosen_idx, client.rejected_idx = relabel(
            client, spec.preference_temperature, stream(s, f"client-{k}/labels"))
        clients.append(client)

    rng = stream(s, "world/public")
    origins = np.arange(spec.public_query_count) % K
    public = np.stack([sample_contexts(clients[k], 1, rng)[0] for k in origins])

    rng = stream(s, "world/encoder")
    d_in = dx + dy
    enc = Encoder(rng.standard_normal((spec.encoder_dim, d_in)) / np.sqrt(d_in),
                  0.1 * rng.standard_normal(spec.encoder_dim))
    return World(spec, clients, public, origins, codebook, enc)


def world_to_json(world: World) -> str:
    doc = {
        "format": WORLD_FORMAT,
        "spec": asdict(world.spec),
        "codebook": world.codebook.tolist(),
        "encoder": {"weight": world.encoder.weight.tolist(), "bias": world.encoder.bias.tolist()},
        "public_queries": world.public_queries.tolist(),
        "public_origins": world.public_origins.tolist(),
        "clients": [
            {
                "client_id": c.client_id,
                "utility": c.utility.tolist(),
                "center": c.center.tolist(),
                "spread": c.spread,
                "contexts": c.contexts.tolist(),
                "chosen_idx": c.chosen_idx.tolist(),
                "rejected_idx": c.rejected_idx.tolist(),
            }
            for c in world.clients
        ],
    }
    return json.dumps(doc)


def world_from_json(text: str) -> World:
    doc = json.loads(text)
    if doc.get("format") != WORLD_FORMAT:
        raise ContractError(f"unsupported world format {doc.get('format')!r}")
    codebook = np.array(doc["codebook"], dtype=np.float64)
    clients = [
        ClientWorld(c["client_id"], np.array(c["utility"]), np.array(c["center"]), c["spread"],
                    np.array(c["contexts"]).reshape(-1, len(c["center"])),
                    np.array(c["chosen_idx"], dtype=int), np.array(c["rejected_idx"], dtype=int),
                    codebook)
        for c in doc["clients"]
    ]
    enc = Encoder(np.array(doc["encoder"]["weight"]), np.array(doc["encoder"]["bias"]))
    return World(WorldSpec(**doc["spec"]), clients, np.array(doc["public_queries"]),
                 np.array(doc["public_origins"], dtype=int), codebook, enc)
