"""Server-side GRPO on routed rewards.

The policy is a categorical distribution over the response codebook, so
ratios, clipping and the KL to the reference policy are all exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import bandit as nts
from .numerics import (
    ContractError,
    GradResult,
    MlpSpec,
    Optimizer,
    TrainingDiverged,
    backward,
    forward,
    init_params,
    log_softmax,
    params_blown_up,
    softmax,
    stream,
)
from .router import Router, route_logits
from .synthdata import Encoder, World, encode

CHECKPOINT_FORMAT = "fedmor-policy/1"
STRATEGIES = ("mor_sparse", "mor_dense", "best_single", "random", "avg_rm", "fedavg_rm")


class Scorer(Protocol):
    num_clients: int

    def score(self, k: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray: ...


@dataclass
class Policy:
    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    def logits(self, X) -> np.ndarray:
        return forward(self.spec, self.params, np.atleast_2d(X))

    def probs(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def copy(self) -> "Policy":
        return Policy(self.spec, self.params.copy())


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    batch_size: int = 16
    clip_epsilon: float = 0.2
    kl_coeff: float = 0.5
    lr: float = 0.01
    total_steps: int = 200
    advantage_eps: float = 1e-8
    optimizer: str = "adam"
    hidden_dims: tuple[int, ...] = (32,)

    def validate(self):
        if self.group_size < 2:
            raise ContractError("group_size must be >= 2")
        if not 0 < self.clip_epsilon < 1:
            raise ContractError("clip_epsilon must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise ContractError("kl_coeff must be nonnegative")


@dataclass
class GroupBatch:
    contexts: np.ndarray        # (B, d_x)
    actions: np.ndarray         # (B, M) codebook indices
    old_logp: np.ndarray        # (B, M) behaviour log-probs, frozen at sampling time
    rewards: np.ndarray         # (B, M)
    advantages: np.ndarray      # (B, M)


def new_policy(d_x: int, V: int, hidden_dims, rng) -> Policy:
    spec = MlpSpec(d_x, tuple(hidden_dims), V, "tanh")
    return Policy(spec, init_params(spec, rng))


def sample_group(policy: Policy, x, M: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """M i.i.d. draws (with replacement) from pi(.|x) per context row, with their log-probs."""
    if M < 2:
        raise ContractError("group size must be >= 2")
    X = np.atleast_2d(x)
    logp = log_softmax(policy.logits(X))
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((len(X), M))
    actions = np.minimum((cdf[:, None, :] <= u[..., None]).sum(-1), cdf.shape[1] - 1)
    lp = np.take_along_axis(logp, actions, axis=1)
    if np.ndim(x) == 1:
        return actions[0], lp[0]
    return actions, lp


def group_advantages(rewards, advantage_eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + eps) along the last axis."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 2:
        raise ContractError("a group needs at least two responses")
    mean = r.mean(axis=-1, keepdims=True)
    std = r.std(axis=-1, keepdims=True)
    return (r - mean) / (std + advantage_eps)


def mixed_reward(router: Router, enc: Encoder, scorer, x, y, mode: str = "dense") -> float:
    """Routed reward for one (x, y): softmax-weighted sum (dense) or argmax client (sparse)."""
    z = route_logits(router, enc, x, y)
    if len(z) != scorer.num_clients:
        raise ContractError(f"router has {len(z)} outputs but there are {scorer.num_clients} clients")
    X, Y = np.atleast_2d(x), np.atleast_2d(y)
    if mode == "sparse":
        return float(scorer.score(int(np.argmax(z)), X, Y)[0])
    if mode != "dense":
        raise ContractError(f"unknown routing mode {mode!r}")
    alpha = softmax(z)
    return float(sum(alpha[k] * scorer.score(k, X, Y)[0] for k in range(len(z))))


def kl_to_reference(policy: Policy, ref: Policy, X) -> np.ndarray:
    """Exact KL(pi_theta(.|x) || pi_ref(.|x)) per context row."""
    lp = log_softmax(policy.logits(X))
    lq = log_softmax(ref.logits(X))
    return np.sum(np.exp(lp) * (lp - lq), axis=1)


def grpo_objective(policy: Policy, ref: Policy, batch: GroupBatch, config: GrpoConfig,
                   params: np.ndarray | None = None) -> GradResult:
    """Negated J = mean_ij min(rho A, clip(rho) A) - beta * mean_i KL(pi || pi_ref), with exact gradient."""
    theta = policy.params if params is None else params
    X = batch.contexts
    B, M = batch.actions.shape
    logits = forward(policy.spec, theta, X)
    lp = log_softmax(logits)
    p = np.exp(lp)
    lp_a = np.take_along_axis(lp, batch.actions, axis=1)
    ratio = np.exp(lp_a - batch.old_logp)
    if not np.all(np.isfinite(ratio)):
        raise ContractError("non-finite importance ratio")
    A = batch.advantages
    eps = config.clip_epsilon
    unclipped = ratio * A
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * A
    surrogate = float(np.mean(np.minimum(unclipped, clipped)))
    lq = log_softmax(forward(ref.spec, ref.params, X))
    d = lp - lq
    kl_rows = np.sum(p * d, axis=1)
    kl = float(np.mean(kl_rows))
    J = surrogate - config.kl_coeff * kl

    # d surrogate / d log pi(a): A * rho where the unclipped branch is the active minimum
    active = unclipped <= clipped
    coef = np.where(active, A * ratio, 0.0) / (B * M)
    g_logits = np.zeros_like(logits)
    rows = np.repeat(np.arange(B), M)
    np.add.at(g_logits, (rows, batch.actions.ravel()), coef.ravel())
    g_logits -= coef.sum(axis=1, keepdims=True) * p
    g_logits -= config.kl_coeff * p * (d - kl_rows[:, None]) / B
    grad = backward(policy.spec, theta, X, -g_logits)
    return GradResult(-J, grad)


@dataclass
class AlignResult:
    policy: Policy
    trace: list[dict]
    bandit_trace: list[dict]
    arm_counts: np.ndarray


def true_utility(world: World, policy: Policy) -> tuple[list[float], float]:
    """Exact expected utility of the policy on each client's public queries, and their mean."""
    probs = policy.probs(world.public_queries)
    per_client = []
    for c in world.clients:
        m = world.public_origins == c.client_id
        u = c.utility_table(world.public_queries[m])
        per_client.append(float(np.mean(np.sum(probs[m] * u, axis=1))))
    return per_client, float(np.mean(per_client))


def _parse_strategy(strategy: str) -> tuple[str, int | None]:
    name, _, arg = strategy.partition(":")
    if name not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    if name == "best_single":
        if not arg:
            raise ContractError("best_single needs a client index, e.g. best_single:0")
        return name, int(arg)
    return name, None


def align(world: World, policy: Policy, router: Router | None, bandit: nts.BanditState | None,
          scorer: Scorer, config: GrpoConfig, strategy: str = "mor_sparse", *, seed: int = 0,
          online: bool = True, invert_bandit_reward: bool = False,
          attribution: str = "majority_arm",
          on_step: Callable[[dict], None] | None = None) -> AlignResult:
    """GRPO loop: sample queries and groups, score, take one policy step, adapt routing.

    ``policy`` is updated in place; the reference policy is frozen from it on entry.
    """
    config.validate()
    name, single_k = _parse_strategy(strategy)
    if attribution not in nts.ATTRIBUTION:
        raise ContractError(f"unknown attribution rule {attribution!r}")
    K = scorer.num_clients
    if name in ("mor_sparse", "mor_dense") and router is None:
        raise ContractError(f"{name} needs a router")
    use_bandit = name == "mor_sparse" and online and bandit is not None
    ref = policy.copy()
    opt = Optimizer(config.optimizer, config.lr)
    rng_batch = stream(seed, "grpo/batch")
    rng_sample = stream(seed, "grpo/sampling")
    rng_arm = stream(seed, "grpo/random-arm")
    rng_ts = stream(seed, "bandit/thompson")
    enc = world.encoder
    codebook = world.codebook
    B, M = config.batch_size, config.group_size
    trace, bandit_trace = [], []
    arm_counts = np.zeros(K, dtype=int)
    J_prev = None

    for step in range(config.total_steps):
        if hasattr(scorer, "begin_step"):
            scorer.begin_step(step)
        qi = rng_batch.choice(len(world.public_queries), size=B, replace=False)
        X = world.public_queries[qi]
        actions, old_logp = sample_group(policy, X, M, rng_sample)
        Xf = np.repeat(X, M, axis=0)
        Yf = codebook[actions.ravel()]
        arms = None
        if name in ("mor_sparse", "mor_dense"):
            C = encode(enc, Xf, Yf)
        if name == "mor_sparse":
            if use_bandit:
                sample = nts.select_arms(bandit, router, C, rng_ts)
                arms = sample.arm
            else:
                arms = np.argmax(route_logits(router, enc, Xf, Yf), axis=1)
        elif name == "random":
            arms = rng_arm.integers(0, K, size=len(Xf))
        elif name in ("best_single", "fedavg_rm"):
            arms = np.full(len(Xf), 0 if single_k is None else single_k)

        if arms is not None:
            rewards = np.zeros(len(Xf))
            for k in range(K):
                m = arms == k
                if m.any():
                    rewards[m] = scorer.score(k, Xf[m], Yf[m])
            arm_counts += np.bincount(arms, minlength=K)
        else:
            if name == "mor_dense":
                alpha = softmax(route_logits(router, enc, Xf, Yf))
            else:
                alpha = np.full((len(Xf), K), 1.0 / K)
            scores = np.stack([scorer.score(k, Xf, Yf) for k in range(K)], axis=1)
            rewards = np.sum(alpha * scores, axis=1)
        rewards = rewards.reshape(B, M)
        batch = GroupBatch(X, actions, old_logp, rewards,
                           group_advantages(rewards, config.advantage_eps))

        _, grad = grpo_objective(policy, ref, batch, config)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged("policy", step, float("nan"))
        policy.params = opt.step(policy.params, grad)
        if params_blown_up(policy.params):
            raise TrainingDiverged("policy", step, float("nan"))
        neg_J, _ = grpo_objective(policy, ref, batch, config)
        J = -neg_J
        if not np.isfinite(J):
            raise TrainingDiverged("policy", step, J)

        if use_bandit and J_prev is not None:
            r_t = nts.bandit_feedback(J, J_prev, invert=invert_bandit_reward)
            counts = np.bincount(arms, minlength=K)
            credited = [int(np.argmax(counts))] if attribution == "majority_arm" else \
                [k for k in range(K) if counts[k] > 0]
            for k in credited:
                c_t = C[arms == k].mean(axis=0)
                r_hat, var, _ = nts.predict(bandit, router, c_t[None, :])
                nts.online_update(bandit, router, c_t, k, r_t)
                bandit_trace.append({
                    "t": bandit.t, "step": step, "context_hash": nts.context_hash(c_t),
                    "r_hat": r_hat[0].tolist(), "variance": var[0].tolist(),
                    "arm": k, "reward": r_t, "delta_J": J - J_prev,
                })
        J_prev = J

        per_client, overall = true_utility(world, policy)
        record = {
            "step": step,
            "objective": J,
            "kl": float(np.mean(kl_to_reference(policy, ref, world.public_queries))),
            "true_utility": per_client,
            "mean_true_utility": overall,
            "arm_histogram": (np.bincount(arms, minlength=K).tolist() if arms is not None else None),
        }
        trace.append(record)
        if on_step is not None:
            on_step(record)
    return AlignResult(policy, trace, bandit_trace, arm_counts)


def checkpoint_to_json(policy: Policy) -> str:
    return json.dumps({"format": CHECKPOINT_FORMAT, "spec": policy.spec.to_dict(),
                       "params": policy.params.tolist()})


def checkpoint_from_json(text: str) -> Policy:
    d = json.loads(text)
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported policy checkpoint {d.get('format')!r}")
    return Policy(MlpSpec.from_dict(d["spec"]), np.array(d["params"], dtype=np.float64))
