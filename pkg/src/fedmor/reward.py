"""Client-local reward models.

A reward model is an MLP on [x; y] trained with the Bradley-Terry pairwise
loss.  After training, the owning client freezes standardization statistics
and from then on only :func:`query_score` output leaves the client.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ContractError,
    GradResult,
    MlpSpec,
    Optimizer,
    TrainingDiverged,
    backward,
    forward,
    init_params,
    params_blown_up,
    sigmoid,
    stable_log_sigmoid,
    stream,
)
from .synthdata import ClientWorld, PreferencePair, sample_client_pairs

CHECKPOINT_FORMAT = "fedmor-reward-model/1"


@dataclass(frozen=True)
class RmConfig:
    hidden_dims: tuple[int, ...] = (32,)
    epochs: int = 40
    batch: int = 64
    lr: float = 0.003
    optimizer: str = "adam"
    heldout_pairs: int = 1000


@dataclass(frozen=True)
class RewardModel:
    spec: MlpSpec
    params: np.ndarray = field(repr=False)
    owner: int
    mu: float | None = None
    sigma: float | None = None
    eps: float = 1e-6
    report: dict = field(default_factory=dict, compare=False)

    @property
    def finalized(self) -> bool:
        return self.mu is not None


def new_reward_model(owner: int, d_x: int, d_y: int, hidden_dims, rng) -> RewardModel:
    spec = MlpSpec(d_x + d_y, tuple(hidden_dims), 1, "tanh")
    return RewardModel(spec, init_params(spec, rng), owner)


def _raw(spec, params, x, y) -> np.ndarray:
    inp = np.concatenate([np.atleast_2d(x), np.atleast_2d(y)], axis=1)
    return forward(spec, params, inp)[:, 0]


def _check_dims(rm: RewardModel, pair: PreferencePair):
    d = np.shape(pair.context)[-1] + np.shape(pair.chosen)[-1]
    if d != rm.spec.input_dim or np.shape(pair.chosen) != np.shape(pair.rejected):
        raise ContractError(f"pair dims {d} do not match reward model input {rm.spec.input_dim}")


def pair_loss(spec: MlpSpec, params: np.ndarray, pair: PreferencePair) -> GradResult:
    """Mean of -log sigmoid(R(x, y+) - R(x, y-)) and its exact gradient."""
    x = np.atleast_2d(pair.context)
    yp = np.atleast_2d(pair.chosen)
    ym = np.atleast_2d(pair.rejected)
    n = len(x)
    inp_p = np.concatenate([x, yp], axis=1)
    inp_m = np.concatenate([x, ym], axis=1)
    delta = forward(spec, params, inp_p)[:, 0] - forward(spec, params, inp_m)[:, 0]
    loss = -float(np.mean(stable_log_sigmoid(delta)))
    up = (-sigmoid(-delta) / n)[:, None]
    grad = backward(spec, params, inp_p, up) - backward(spec, params, inp_m, up)
    return GradResult(loss, grad)


def rm_pair_loss(rm: RewardModel, pair: PreferencePair) -> GradResult:
    _check_dims(rm, pair)
    return pair_loss(rm.spec, rm.params, pair)


def ranking_accuracy(score_fn, pairs: PreferencePair) -> float:
    """Fraction of pairs where score(x, y+) > score(x, y-)."""
    sp = score_fn(pairs.context, pairs.chosen)
    sm = score_fn(pairs.context, pairs.rejected)
    return float(np.mean(sp > sm))


def fit_pairs(spec: MlpSpec, params: np.ndarray, pairs: PreferencePair, config: RmConfig,
              rng, what: str = "reward model") -> np.ndarray:
    """Minibatch Bradley-Terry training; returns the new parameters."""
    opt = Optimizer(config.optimizer, config.lr)
    n = len(pairs)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            loss, grad = pair_loss(spec, params, pairs.subset(order[start:start + config.batch]))
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(what, step, loss)
            params = opt.step(params, grad)
            if params_blown_up(params):
                raise TrainingDiverged(what, step, loss)
            step += 1
    return params


def train_reward_model(world: ClientWorld, config: RmConfig = RmConfig(), seed: int = 0,
                       tau: float = 0.5, heldout: PreferencePair | None = None) -> RewardModel:
    """Train client ``world.client_id``'s reward model on its private pairs.

    Held-out accuracy is measured on fresh pairs from the client's own
    distribution unless ``heldout`` is given.
    """
    if len(world) == 0:
        raise ContractError("cannot train a reward model on an empty dataset")
    k = world.client_id
    d_x = world.contexts.shape[1]
    d_y = world.codebook.shape[1]
    rm = new_reward_model(k, d_x, d_y, config.hidden_dims, stream(seed, f"client-{k}/rm-init"))
    params = fit_pairs(rm.spec, rm.params, world.pairs, config, stream(seed, f"client-{k}/rm-train"),
                       what=f"client {k} reward model")
    if heldout is None:
        heldout = sample_client_pairs(world, config.heldout_pairs, tau, stream(seed, f"client-{k}/heldout"))
    score = lambda x, y: _raw(rm.spec, params, x, y)
    report = {
        "train_accuracy": ranking_accuracy(score, world.pairs),
        "heldout_accuracy": ranking_accuracy(score, heldout),
        "train_loss": pair_loss(rm.spec, params, world.pairs).loss,
    }
    return dataclasses.replace(rm, params=params, report=report)


def finalize_normalization(rm: RewardModel, training_pairs: PreferencePair) -> RewardModel:
    """Freeze mean / population std of raw scores over all chosen and rejected responses."""
    if len(training_pairs) == 0:
        raise ContractError("normalization needs a nonempty training set")
    raw = np.concatenate([
        _raw(rm.spec, rm.params, training_pairs.context, training_pairs.chosen),
        _raw(rm.spec, rm.params, training_pairs.context, training_pairs.rejected),
    ])
    return dataclasses.replace(rm, mu=float(raw.mean()), sigma=float(raw.std()))


def query_score(rm: RewardModel, x, y, standardize: bool = True):
    """Standardized score (R(x, y) - mu) / (sigma + eps); the client's only export.

    ``standardize=False`` returns the raw score (the normalization ablation).
    """
    if not rm.finalized:
        raise ContractError(f"client {rm.owner} reward model queried before normalization was finalized")
    single = np.ndim(x) == 1
    raw = _raw(rm.spec, rm.params, x, y)
    out = (raw - rm.mu) / (rm.sigma + rm.eps) if standardize else raw
    return float(out[0]) if single else out


def checkpoint_to_json(rm: RewardModel) -> str:
    return json.dumps({
        "format": CHECKPOINT_FORMAT,
        "spec": rm.spec.to_dict(),
        "params": rm.params.tolist(),
        "owner": rm.owner,
        "mu": rm.mu,
        "sigma": rm.sigma,
        "eps": rm.eps,
    })


def checkpoint_from_json(text: str) -> RewardModel:
    d = json.loads(text)
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported reward checkpoint {d.get('format')!r}")
    return RewardModel(MlpSpec.from_dict(d["spec"]), np.array(d["params"], dtype=np.float64),
                       d["owner"], d["mu"], d["sigma"], d["eps"])
