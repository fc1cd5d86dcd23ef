"""Three-stage protocol orchestration with a byte-exact communication ledger.

Transport is simulated in-process.  Every message crossing the client/server
line is logged with a size computed from fixed sizing rules (8 bytes per
float plus a 16-byte header), never from in-memory object sizes.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import bandit as nts
from .grpo import AlignResult, GrpoConfig, Policy, align, new_policy
from .numerics import ContractError, Optimizer, stream
from .reward import (
    RewardModel,
    RmConfig,
    _raw,
    finalize_normalization,
    fit_pairs,
    new_reward_model,
    query_score,
    train_reward_model,
)
from .router import (
    Router,
    RouterConfig,
    RouterUpdate,
    aggregate,
    local_router_train,
    new_router,
    routing_accuracy,
)
from .synthdata import ClientWorld, PreferencePair, World, sample_client_pairs

DIRECTIONS = ("server_to_client", "client_to_server")
STAGES = ("router_fl", "reward_query", "reward_score", "rm_params")
MOR_STAGES = frozenset({"router_fl", "reward_query", "reward_score"})
HEADER_BYTES = 16
BYTES_PER_FLOAT = 8


class BoundaryViolation(RuntimeError):
    """Something other than router parameters or reward queries/scores tried to cross."""


@dataclass(frozen=True, slots=True)
class Message:
    direction: str
    stage: str
    payload_bytes: int
    round: int
    client: int


@dataclass(frozen=True)
class Sizing:
    context_dim: int
    response_dim: int
    raw_image_bytes: int = 0
    bytes_per_param: int = BYTES_PER_FLOAT
    header: int = HEADER_BYTES

    @property
    def query_bytes(self) -> int:
        """S_q: one (x, y) feature pair plus any modelled image payload."""
        return (self.context_dim + self.response_dim) * BYTES_PER_FLOAT + self.raw_image_bytes + self.header

    @property
    def score_bytes(self) -> int:
        """S_r: one scalar reward."""
        return BYTES_PER_FLOAT + self.header

    def param_bytes(self, num_params: int) -> int:
        return num_params * self.bytes_per_param + self.header


@dataclass
class CommLedger:
    sizing: Sizing
    mode: str = "mor"
    messages: list[Message] = field(default_factory=list)

    def record(self, direction: str, stage: str, payload_bytes: int, round: int, client: int):
        if direction not in DIRECTIONS or stage not in STAGES:
            raise ContractError(f"unknown message kind {direction}/{stage}")
        if self.mode == "mor" and stage not in MOR_STAGES:
            raise BoundaryViolation(f"{stage} messages are not allowed under MoR")
        self.messages.append(Message(direction, stage, int(payload_bytes), int(round), int(client)))

    def total(self) -> int:
        return sum(m.payload_bytes for m in self.messages)

    def by_stage(self) -> dict[str, int]:
        out = {s: 0 for s in STAGES}
        for m in self.messages:
            out[m.stage] += m.payload_bytes
        return out

    def by_client(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for m in self.messages:
            out[m.client] += m.payload_bytes
        return dict(sorted(out.items()))

    def count(self, stage: str) -> int:
        return sum(1 for m in self.messages if m.stage == stage)

    def stage_kinds(self) -> set[str]:
        return {m.stage for m in self.messages}

    def to_json(self) -> str:
        return json.dumps({"sizing": dataclasses.asdict(self.sizing), "mode": self.mode,
                           "messages": [dataclasses.astuple(m) for m in self.messages]})


def transmit(ledger: CommLedger, payload, stage: str, direction: str, client: int, round: int) -> None:
    """Move ``payload`` across the boundary, logging its declared size.

    Only router parameter vectors, (x, y) query rows and scalar scores may
    cross in MoR mode; reward-model parameters only in the FedAvg baseline;
    raw preference data never.
    """
    if isinstance(payload, (PreferencePair, ClientWorld)):
        raise BoundaryViolation("private preference data may not leave a client")
    if isinstance(payload, RewardModel):
        raise BoundaryViolation("reward models may not leave a client; send parameters via rm_params")
    if stage in ("router_fl", "rm_params"):
        size = ledger.sizing.param_bytes(int(np.asarray(payload).size))
    elif stage == "reward_query":
        size = ledger.sizing.query_bytes
    elif stage == "reward_score":
        size = ledger.sizing.score_bytes
    else:
        raise ContractError(f"unknown stage {stage!r}")
    ledger.record(direction, stage, size, round, client)


class RewardChannel:
    """Server-side handle on the client reward models.

    Each scored row costs one query message out and one score message back;
    only :func:`query_score` output is returned to the caller.
    """

    def __init__(self, reward_models: list[RewardModel], ledger: CommLedger | None = None,
                 standardize: bool = True):
        self._models = list(reward_models)
        self.ledger = ledger
        self.standardize = standardize
        self.num_clients = len(self._models)
        self.round = 0

    def begin_step(self, step: int):
        self.round = step

    def score(self, k: int, X, Y) -> np.ndarray:
        X, Y = np.atleast_2d(X), np.atleast_2d(Y)
        if self.ledger is not None:
            for x, y in zip(X, Y):
                transmit(self.ledger, np.concatenate([x, y]), "reward_query", "server_to_client", k, self.round)
        s = np.atleast_1d(query_score(self._models[k], X, Y, standardize=self.standardize))
        if self.ledger is not None:
            for v in s:
                transmit(self.ledger, v, "reward_score", "client_to_server", k, self.round)
        return s


class ServerRewardModel:
    """A reward model held by the server itself (FedAvg baseline); scoring sends nothing."""

    num_clients = 1

    def __init__(self, rm: RewardModel):
        self._rm = rm

    def score(self, k: int, X, Y) -> np.ndarray:
        return _raw(self._rm.spec, self._rm.params, X, Y)


def train_router_federated(world: World, config: RouterConfig, ledger: CommLedger | None,
                           seed: int = 0, router: Router | None = None) -> Router:
    """FedAvg over clients' local BCE routing objectives."""
    K = world.spec.num_clients
    if router is None:
        router = new_router(world.encoder.output_dim, K, config.hidden_dims, stream(seed, "server/router-init"))
    part_rng = stream(seed, "server/participation")
    n_part = max(1, int(round(config.participation * K)))
    for r in range(config.rounds):
        participants = (list(range(K)) if n_part == K
                        else sorted(part_rng.choice(K, size=n_part, replace=False).tolist()))
        updates = []
        for k in participants:
            if ledger is not None:
                transmit(ledger, router.params, "router_fl", "server_to_client", k, r)
            upd = local_router_train(router, world.encoder, world.clients[k].pairs, config,
                                     stream(seed, f"client-{k}/router-round-{r}"))
            if ledger is not None:
                transmit(ledger, upd.params, "router_fl", "client_to_server", k, r)
            updates.append(upd)
        router = Router(router.spec, aggregate(updates))
    return router


def train_fedavg_reward_model(world: World, config: RmConfig, rounds: int, ledger: CommLedger | None,
                              seed: int = 0, local_epochs: int = 1) -> RewardModel:
    """Baseline: one reward model trained by parameter averaging across clients."""
    spec_probe = None
    K = world.spec.num_clients
    d_x, d_y = world.spec.context_dim, world.spec.response_dim
    global_rm = new_reward_model(-1, d_x, d_y, config.hidden_dims, stream(seed, "server/fedavg-rm-init"))
    params = global_rm.params
    local_cfg = dataclasses.replace(config, epochs=local_epochs)
    for r in range(rounds):
        updates = []
        for k in range(K):
            if ledger is not None:
                transmit(ledger, params, "rm_params", "server_to_client", k, r)
            p_k = fit_pairs(global_rm.spec, params.copy(), world.clients[k].pairs, local_cfg,
                            stream(seed, f"client-{k}/fedavg-rm-round-{r}"), what=f"client {k} fedavg RM")
            if ledger is not None:
                transmit(ledger, p_k, "rm_params", "client_to_server", k, r)
            updates.append(RouterUpdate(k, p_k, len(world.clients[k])))
        params = aggregate(updates)
    return dataclasses.replace(global_rm, params=params)


@dataclass(frozen=True)
class Ablations:
    no_online: bool = False
    no_norm: bool = False
    invert_bandit_reward: bool = False


@dataclass(frozen=True)
class ProtocolConfig:
    rm: RmConfig = RmConfig()
    router_fl: RouterConfig = RouterConfig()
    grpo: GrpoConfig = GrpoConfig()
    bandit: nts.BanditConfig = nts.BanditConfig()
    client_hidden_dims: tuple[tuple[int, ...], ...] | None = None
    raw_image_bytes: int = 0
    fedavg_local_epochs: int = 1
    eval_pairs_per_client: int = 500


@dataclass
class ClientArtifacts:
    """Stage A and B outputs shared by every alignment strategy on one world."""
    world: World
    reward_models: list[RewardModel]
    router: Router | None
    stage_b_messages: list[Message]
    eval_pairs: list[PreferencePair]
    metrics: dict


def _rm_config_for(config: ProtocolConfig, k: int) -> RmConfig:
    if config.client_hidden_dims is None:
        return config.rm
    return dataclasses.replace(config.rm, hidden_dims=tuple(config.client_hidden_dims[k]))


def routed_ranking_accuracy(router: Router, world: World, channel: RewardChannel,
                            pairs: PreferencePair) -> float:
    """Pairwise accuracy when each pair is judged by the client its two responses jointly route to."""
    from .router import route_logits

    z = (route_logits(router, world.encoder, pairs.context, pairs.chosen)
         + route_logits(router, world.encoder, pairs.context, pairs.rejected))
    arms = np.argmax(z, axis=1)
    correct = 0
    for k in range(channel.num_clients):
        m = arms == k
        if m.any():
            sp = channel.score(k, pairs.context[m], pairs.chosen[m])
            sm = channel.score(k, pairs.context[m], pairs.rejected[m])
            correct += int(np.sum(sp > sm))
    return correct / len(pairs)


def pooled(pairs: list[PreferencePair]) -> PreferencePair:
    return PreferencePair(np.concatenate([p.context for p in pairs]),
                          np.concatenate([p.chosen for p in pairs]),
                          np.concatenate([p.rejected for p in pairs]), -1)


def prepare_clients(world: World, config: ProtocolConfig, seed: int, with_router: bool = True) -> ClientArtifacts:
    """Stage A (client-local reward models) and Stage B (federated router)."""
    tau = world.spec.preference_temperature
    rms = []
    for c in world.clients:
        rm = train_reward_model(c, _rm_config_for(config, c.client_id), seed=seed, tau=tau)
        rms.append(finalize_normalization(rm, c.pairs))
    eval_pairs = [sample_client_pairs(c, config.eval_pairs_per_client, tau, stream(seed, f"client-{c.client_id}/eval"))
                  for c in world.clients]
    metrics = {
        "rm_train_accuracy": [rm.report["train_accuracy"] for rm in rms],
        "rm_heldout_accuracy": [rm.report["heldout_accuracy"] for rm in rms],
    }
    router = None
    messages: list[Message] = []
    if with_router:
        ledger = CommLedger(Sizing(world.spec.context_dim, world.spec.response_dim, config.raw_image_bytes))
        router = train_router_federated(world, config.router_fl, ledger, seed=seed)
        messages = list(ledger.messages)
        metrics["routing_accuracy"] = routing_accuracy(router, world.encoder, eval_pairs)
        channel = RewardChannel(rms)
        pool = pooled(eval_pairs)
        metrics["routed_ranking_accuracy"] = routed_ranking_accuracy(router, world, channel, pool)
        metrics["single_rm_ranking_accuracy"] = [
            float(np.mean(channel.score(k, pool.context, pool.chosen) > channel.score(k, pool.context, pool.rejected)))
            for k in range(len(rms))
        ]
    return ClientArtifacts(world, rms, router, messages, eval_pairs, metrics)


@dataclass
class ProtocolResult:
    artifacts: ClientArtifacts
    ledger: CommLedger
    align: AlignResult
    metrics: dict


def run_alignment(artifacts: ClientArtifacts, config: ProtocolConfig, strategy: str,
                  ablations: Ablations = Ablations(), seed: int = 0, on_step=None) -> ProtocolResult:
    """Stage C for one strategy, reusing the shared Stage A/B artifacts."""
    world = artifacts.world
    name = strategy.partition(":")[0]
    sizing = Sizing(world.spec.context_dim, world.spec.response_dim, config.raw_image_bytes)
    ledger = CommLedger(sizing, mode="fedavg" if name == "fedavg_rm" else "mor")
    if name in ("mor_sparse", "mor_dense"):
        if artifacts.router is None:
            raise ContractError(f"{strategy} needs the federated router from stage B")
        ledger.messages.extend(artifacts.stage_b_messages)

    if name == "fedavg_rm":
        specs = {rm.spec for rm in artifacts.reward_models}
        if len(specs) != 1:
            raise ContractError("fedavg_rm needs every client to use the same reward-model architecture")
        global_rm = train_fedavg_reward_model(world, _rm_config_for(config, 0), config.router_fl.rounds,
                                              ledger, seed=seed, local_epochs=config.fedavg_local_epochs)
        scorer = ServerRewardModel(global_rm)
    else:
        scorer = RewardChannel(artifacts.reward_models, ledger, standardize=not ablations.no_norm)

    policy = new_policy(world.spec.context_dim, world.spec.codebook_size, config.grpo.hidden_dims,
                        stream(seed, "server/policy-init"))
    bandit = None
    online = name == "mor_sparse" and not ablations.no_online
    if online:
        bandit = nts.init_bandit(artifacts.router, config.bandit)
    result = align(world, policy, artifacts.router, bandit, scorer, config.grpo, strategy, seed=seed,
                   online=online, invert_bandit_reward=ablations.invert_bandit_reward,
                   attribution=config.bandit.attribution, on_step=on_step)
    if name != "fedavg_rm":
        bad = ledger.stage_kinds() - MOR_STAGES
        if bad:
            raise BoundaryViolation(f"ledger contains forbidden message kinds {sorted(bad)}")
    final = result.trace[-1] if result.trace else None
    metrics = {
        "strategy": strategy,
        "true_utility": final["true_utility"] if final else None,
        "mean_true_utility": final["mean_true_utility"] if final else None,
        "final_kl": final["kl"] if final else None,
        "bytes_total": ledger.total(),
        "bytes_by_stage": ledger.by_stage(),
        "arm_counts": result.arm_counts.tolist(),
    }
    return ProtocolResult(artifacts, ledger, result, metrics)


def run_protocol(world: World, config: ProtocolConfig, strategy: str,
                 ablations: Ablations = Ablations(), seed: int = 0) -> ProtocolResult:
    name = strategy.partition(":")[0]
    artifacts = prepare_clients(world, config, seed, with_router=name in ("mor_sparse", "mor_dense"))
    return run_alignment(artifacts, config, strategy, ablations, seed)


# closed-form costs -----------------------------------------------------------

def router_fl_bytes(K: int, rounds: int, num_router_params: int, sizing: Sizing) -> int:
    return 2 * K * rounds * sizing.param_bytes(num_router_params)


def reward_stage_bytes(queries: int, sizing: Sizing) -> int:
    return queries * (sizing.query_bytes + sizing.score_bytes)


def fedavg_rm_bytes(K: int, rounds: int, num_rm_params: int, sizing: Sizing) -> int:
    return 2 * K * rounds * sizing.param_bytes(num_rm_params)


def ledger_report(ledger: CommLedger, strategy: str = "", K: int | None = None) -> list[dict]:
    """Rows (K, strategy, stage, bytes), one per stage plus a total row."""
    by_stage = ledger.by_stage()
    rows = [{"K": K, "strategy": strategy, "stage": s, "bytes": by_stage[s]} for s in STAGES]
    rows.append({"K": K, "strategy": strategy, "stage": "total", "bytes": sum(by_stage.values())})
    return rows


def scaling_table(Ks, sizing: Sizing, rounds: int, num_router_params: int, num_rm_params: int,
                  reward_queries: int, num_lora_params: int | None = None) -> list[dict]:
    """Closed-form cumulative cost per strategy across client counts."""
    rows = []
    for K in Ks:
        b = router_fl_bytes(K, rounds, num_router_params, sizing)
        rows.append({"K": K, "strategy": "mor_sparse", "stage": "router_fl", "bytes": b})
        rows.append({"K": K, "strategy": "mor_sparse", "stage": "reward",
                     "bytes": reward_stage_bytes(reward_queries, sizing)})
        rows.append({"K": K, "strategy": "mor_dense", "stage": "reward",
                     "bytes": reward_stage_bytes(K * reward_queries, sizing)})
        rows.append({"K": K, "strategy": "fedavg_rm", "stage": "rm_params",
                     "bytes": fedavg_rm_bytes(K, rounds, num_rm_params, sizing)})
        if num_lora_params is not None:
            rows.append({"K": K, "strategy": "lora_avg", "stage": "adapter_params",
                         "bytes": 2 * K * rounds * sizing.param_bytes(num_lora_params)})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()
