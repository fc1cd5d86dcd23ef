"""Online routing adaptation with Neural Thompson Sampling.

Only the router's final linear layer (one weight row and one bias per arm)
is adapted online; the hidden trunk stays frozen.  The predicted utility of
arm k is r_hat_k = sigmoid(z_k), with z the head logits, so predictions live
on the same [0, 1] scale as the binary feedback.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError, GradResult, features, head_slice, sigmoid
from .router import Router

ATTRIBUTION = ("majority_arm", "per_arm_replay")


@dataclass(frozen=True)
class BanditConfig:
    nu: float = 1.0
    lam: float = 1.0
    lr: float = 0.1
    steps_per_feedback: int = 1
    reinvert_every: int = 500
    attribution: str = "majority_arm"


@dataclass
class BanditState:
    head: np.ndarray
    anchor: np.ndarray = field(repr=False)
    U: np.ndarray = field(repr=False)
    U_inv: np.ndarray = field(repr=False)
    num_arms: int
    nu: float = 1.0
    lam: float = 1.0
    lr: float = 0.1
    steps_per_feedback: int = 1
    reinvert_every: int = 500
    t: int = 0
    history_features: list = field(default_factory=list, repr=False)
    history_arms: list = field(default_factory=list, repr=False)
    history_rewards: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.head.size


@dataclass
class ArmSample:
    context: np.ndarray
    r_hat: np.ndarray
    variance: np.ndarray
    sampled: np.ndarray
    arm: int | np.ndarray


def init_bandit(router: Router, config: BanditConfig = BanditConfig()) -> BanditState:
    """Anchor the bandit at the offline-trained router head; U starts at lam * I."""
    if config.nu < 0 or config.lam <= 0:
        raise ContractError("bandit needs nu >= 0 and lam > 0")
    head = router.params[head_slice(router.spec)].copy()
    d = head.size
    return BanditState(head, head.copy(), config.lam * np.eye(d), np.eye(d) / config.lam,
                       router.num_clients, config.nu, config.lam, config.lr,
                       config.steps_per_feedback, config.reinvert_every)


def _split_head(state: BanditState):
    K = state.num_arms
    F = state.dim // K - 1
    return state.head[:K * F].reshape(K, F), state.head[K * F:]


def head_logits(state: BanditState, router: Router, C) -> np.ndarray:
    """Logits of the adapted head on encoded contexts (rows of ``C``)."""
    Fx = features(router.spec, router.params, np.atleast_2d(C))
    W, b = _split_head(state)
    return Fx @ W.T + b


def _arm_gradients(state, Fx, z):
    """Gradient of sigmoid(z_k) w.r.t. the head, for every row and arm: (n, K, d_p)."""
    n, F = Fx.shape
    K = state.num_arms
    s = sigmoid(z)
    ds = s * (1.0 - s)
    G = np.zeros((n, K, state.dim))
    for k in range(K):
        G[:, k, k * F:(k + 1) * F] = ds[:, k:k + 1] * Fx
        G[:, k, K * F + k] = ds[:, k]
    return G


def predict(state: BanditState, router: Router, C):
    """(r_hat, variance, gradients) for each row of ``C`` and every arm."""
    C = np.atleast_2d(C)
    Fx = features(router.spec, router.params, C)
    W, b = _split_head(state)
    z = Fx @ W.T + b
    G = _arm_gradients(state, Fx, z)
    var = state.lam * np.einsum("nkd,de,nke->nk", G, state.U_inv, G)
    return sigmoid(z), np.maximum(var, 0.0), G


def select_arms(state: BanditState, router: Router, C, rng) -> ArmSample:
    """Thompson draw r~ ~ N(r_hat, nu^2 var) per arm and row; pick argmax (lowest index on ties)."""
    if not np.all(np.isfinite(state.U_inv)):
        raise ContractError("bandit covariance inverse is not finite")
    C = np.atleast_2d(C)
    r_hat, var, _ = predict(state, router, C)
    noise = rng.standard_normal(r_hat.shape)
    sampled = r_hat + state.nu * np.sqrt(var) * noise
    return ArmSample(C, r_hat, var, sampled, np.argmax(sampled, axis=1))


def select_arm(state: BanditState, router: Router, c, rng) -> ArmSample:
    s = select_arms(state, router, np.atleast_2d(c), rng)
    return ArmSample(s.context[0], s.r_hat[0], s.variance[0], s.sampled[0], int(s.arm[0]))


def bandit_feedback(J_curr: float, J_prev: float, invert: bool = False) -> int:
    """Binary reward from the objective change: 0 if it improved, 1 otherwise.

    ``invert=True`` flips the convention so that 1 marks an improvement.
    """
    if not (np.isfinite(J_curr) and np.isfinite(J_prev)):
        raise ContractError("bandit feedback needs finite objective values")
    improved = (J_curr - J_prev) > 0
    r = 0 if improved else 1
    return 1 - r if invert else r


def online_loss(state: BanditState, router: Router, head: np.ndarray, contexts, arms, rewards) -> GradResult:
    """Anchored squared loss over observed transitions, and its gradient w.r.t. ``head``.

    (1/n) [sum_i 0.5 (r_hat_{arm_i}(c_i) - r_i)^2 + lam/2 ||head - anchor||^2];
    with a single transition this is exactly 0.5 (r_hat - r)^2 + lam/2 ||head - anchor||^2.
    """
    Fx = features(router.spec, router.params, np.atleast_2d(contexts))
    return _anchored_loss(state, head, Fx, arms, rewards)


def _anchored_loss(state, head, Fx, arms, rewards):
    arms = np.atleast_1d(arms).astype(int)
    r = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
    n = len(Fx)
    K = state.num_arms
    F = state.dim // K - 1
    W = head[:K * F].reshape(K, F)
    b = head[K * F:]
    s = sigmoid(np.einsum("nf,nf->n", Fx, W[arms]) + b[arms])
    diff = head - state.anchor
    loss = (0.5 * float(np.sum((s - r) ** 2)) + 0.5 * state.lam * float(diff @ diff)) / n
    coef = (s - r) * s * (1.0 - s)
    g = np.zeros_like(head)
    for k in range(K):
        m = arms == k
        g[k * F:(k + 1) * F] = coef[m] @ Fx[m]
        g[K * F + k] = coef[m].sum()
    return GradResult(loss, (g + state.lam * diff) / n)


def online_update(state: BanditState, router: Router, c, arm: int, r: float) -> BanditState:
    """Record (c, arm, r), take proximal-gradient steps on the anchored loss over
    all recorded transitions, then add g g^T to U with g taken at the new head."""
    c = np.asarray(c, dtype=np.float64)
    # the trunk is frozen, so cached features stay valid
    state.history_features.append(features(router.spec, router.params, c))
    state.history_arms.append(int(arm))
    state.history_rewards.append(float(r))
    Fx = np.array(state.history_features)
    n = len(Fx)
    shrink = state.lr * state.lam / n
    for _ in range(state.steps_per_feedback):
        # explicit step on the squared error, proximal (implicit) step on the anchor term;
        # stable for any lam and exactly pinned to the anchor as lam grows
        _, grad = _anchored_loss(state, state.head, Fx, state.history_arms, state.history_rewards)
        data_grad = grad - state.lam * (state.head - state.anchor) / n
        state.head = state.anchor + (state.head - state.anchor - state.lr * data_grad) / (1.0 + shrink)
    _, _, G = predict(state, router, c[None, :])
    g = G[0, arm]
    state.U = state.U + np.outer(g, g)
    Ug = state.U_inv @ g
    state.U_inv = state.U_inv - np.outer(Ug, Ug) / (1.0 + g @ Ug)
    state.t += 1
    if state.reinvert_every and state.t % state.reinvert_every == 0:
        state.U_inv = np.linalg.inv(state.U)
    return state


def adapted_router(state: BanditState, router: Router) -> Router:
    """The router with its head replaced by the bandit's current head."""
    params = router.params.copy()
    params[head_slice(router.spec)] = state.head
    return Router(router.spec, params)


def context_hash(c) -> str:
    return hashlib.sha256(np.ascontiguousarray(c, dtype=np.float64).tobytes()).hexdigest()[:16]
