"""Experiment configuration: a versioned YAML document with field-level validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

from .bandit import ATTRIBUTION, BanditConfig
from .federation import Ablations, ProtocolConfig
from .grpo import STRATEGIES, GrpoConfig
from .reward import RmConfig
from .router import RouterConfig
from .synthdata import HETEROGENEITY, WorldSpec

CONFIG_VERSION = 1
ABLATIONS = ("no_online", "no_norm", "invert_bandit_reward")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n" + "\n".join(f"  {p}" for p in problems))


@dataclass(frozen=True)
class ProtocolSection:
    client_hidden_dims: tuple[tuple[int, ...], ...] | None = None
    raw_image_bytes: int = 0
    fedavg_local_epochs: int = 1
    eval_pairs_per_client: int = 500


@dataclass(frozen=True)
class ReportSection:
    k_sweep: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
    lora_params: int | None = None
    mia_variants: tuple[str, ...] = ("norm_clip(1.5)", "norm_clip(2.0)", "norm", "raw")
    mia_pairs: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    strategy: str = "mor_sparse"
    output_dir: str = "runs/default"
    ablations: Ablations = Ablations()
    world: WorldSpec = WorldSpec()
    rm: RmConfig = RmConfig()
    router_fl: RouterConfig = RouterConfig()
    grpo: GrpoConfig = GrpoConfig()
    bandit: BanditConfig = BanditConfig()
    protocol: ProtocolSection = ProtocolSection()
    report: ReportSection = ReportSection()

    def world_spec(self) -> WorldSpec:
        return dataclasses.replace(self.world, seed=self.seed)

    def protocol_config(self) -> ProtocolConfig:
        p = self.protocol
        return ProtocolConfig(self.rm, self.router_fl, self.grpo, self.bandit, p.client_hidden_dims,
                              p.raw_image_bytes, p.fedavg_local_epochs, p.eval_pairs_per_client)


# the world seed always follows the experiment seed
_HIDDEN = {("world", "seed")}


def _coerce(value, default, path, problems):
    """Coerce a parsed YAML value to the type of ``default``; record a problem on failure."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected a mapping")
            return default
        return _build(type(default), value, path, problems)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # YAML 1.1 loads exponent forms without a dot (1e-5) as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            proto = default[0] if default else 0
            out = tuple(_coerce(v, proto, f"{path}[{i}]", problems) for i, v in enumerate(value))
            return out
    problems.append(f"{path}: expected {type(default).__name__}, got {value!r}")
    return default


def _build(cls, data: dict, prefix: str, problems: list[str]):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    section = prefix.rstrip(".")
    for key in sorted(set(data) - names):
        problems.append(f"{prefix}{key}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        if (section, f.name) in _HIDDEN:
            problems.append(f"{prefix}{f.name}: not settable here, use the top-level seed")
            continue
        value, default = data[f.name], getattr(defaults, f.name)
        path = f"{prefix}{f.name}"
        if f.name == "client_hidden_dims":
            kwargs[f.name] = _hidden_list(value, path, problems)
        elif f.name == "lora_params":
            if value is None or (isinstance(value, int) and not isinstance(value, bool) and value > 0):
                kwargs[f.name] = value
            else:
                problems.append(f"{path}: expected a positive integer or null")
        elif dataclasses.is_dataclass(default):
            kwargs[f.name] = _coerce(value, default, f"{path}.", problems) if isinstance(value, dict) \
                else _coerce(value, default, path, problems)
        else:
            kwargs[f.name] = _coerce(value, default, path, problems)
    return dataclasses.replace(defaults, **kwargs)


def _hidden_list(value, path, problems):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, (list, tuple)) for v in value):
        problems.append(f"{path}: expected a list of hidden-size lists or null")
        return None
    return tuple(tuple(_coerce(h, 0, f"{path}[{i}]", problems) for h in v) for i, v in enumerate(value))


def _check(cfg: ExperimentConfig, problems: list[str]):
    w = cfg.world
    if cfg.version != CONFIG_VERSION:
        problems.append(f"version: unsupported config version {cfg.version} (expected {CONFIG_VERSION})")
    if w.num_clients < 2:
        problems.append("world.num_clients: must be >= 2")
    if w.codebook_size < 2:
        problems.append("world.codebook_size: must be >= 2")
    if not w.preference_temperature > 0:
        problems.append("world.preference_temperature: must be > 0")
    if w.heterogeneity not in HETEROGENEITY:
        problems.append(f"world.heterogeneity: must be one of {', '.join(HETEROGENEITY)}")
    for name in ("context_dim", "response_dim", "encoder_dim", "pairs_per_client", "public_query_count"):
        if getattr(w, name) <= 0:
            problems.append(f"world.{name}: must be positive")
    if w.center_separation < 0:
        problems.append("world.center_separation: must be nonnegative")
    if w.context_spread < 0:
        problems.append("world.context_spread: must be nonnegative")

    name, _, arg = cfg.strategy.partition(":")
    if name not in STRATEGIES:
        problems.append(f"strategy: must be one of {', '.join(STRATEGIES)} (best_single as best_single:K)")
    elif name == "best_single":
        if not arg.isdigit() or int(arg) >= w.num_clients:
            problems.append(f"strategy: best_single needs a client index in [0, {w.num_clients})")
    elif arg:
        problems.append(f"strategy: {name} takes no argument")

    g = cfg.grpo
    if g.group_size < 2:
        problems.append("grpo.group_size: must be >= 2")
    if not 0 < g.clip_epsilon < 1:
        problems.append("grpo.clip_epsilon: must lie in (0, 1)")
    if g.kl_coeff < 0:
        problems.append("grpo.kl_coeff: must be >= 0")
    if g.batch_size < 1 or g.batch_size > w.public_query_count:
        problems.append("grpo.batch_size: must lie in [1, world.public_query_count]")
    for sect, c in (("rm", cfg.rm), ("grpo", g)):
        if c.optimizer not in ("sgd", "adam"):
            problems.append(f"{sect}.optimizer: must be sgd or adam")
        if c.lr <= 0:
            problems.append(f"{sect}.lr: must be > 0")
    for sect, c, fields in (("rm", cfg.rm, ("epochs", "batch", "heldout_pairs")),
                            ("router_fl", cfg.router_fl, ("rounds", "local_steps", "batch")),
                            ("grpo", g, ("total_steps",))):
        for f in fields:
            if getattr(c, f) < (1 if f in ("batch", "heldout_pairs") else 0):
                problems.append(f"{sect}.{f}: out of range")
    if not 0 < cfg.router_fl.participation <= 1:
        problems.append("router_fl.participation: must lie in (0, 1]")
    if cfg.router_fl.lr <= 0:
        problems.append("router_fl.lr: must be > 0")
    b = cfg.bandit
    if b.nu < 0:
        problems.append("bandit.nu: must be >= 0")
    if b.lam <= 0:
        problems.append("bandit.lam: must be > 0")
    if b.attribution not in ATTRIBUTION:
        problems.append(f"bandit.attribution: must be one of {', '.join(ATTRIBUTION)}")
    p = cfg.protocol
    if p.client_hidden_dims is not None:
        if len(p.client_hidden_dims) != w.num_clients:
            problems.append("protocol.client_hidden_dims: need one entry per client")
        elif name == "fedavg_rm" and len(set(p.client_hidden_dims)) > 1:
            problems.append("strategy: fedavg_rm is unsupported with heterogeneous reward-model architectures")
        if any(h <= 0 for dims in p.client_hidden_dims for h in dims):
            problems.append("protocol.client_hidden_dims: sizes must be positive")
    if p.raw_image_bytes < 0:
        problems.append("protocol.raw_image_bytes: must be >= 0")
    if any(k < 2 for k in cfg.report.k_sweep):
        problems.append("report.k_sweep: client counts must be >= 2")
    from .privacy import parse_variant
    for v in cfg.report.mia_variants:
        try:
            parse_variant(v)
        except (ValueError, TypeError):
            problems.append(f"report.mia_variants: bad variant {v!r}")


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    problems: list[str] = []
    cfg = _build(ExperimentConfig, data, "", problems)
    if not problems:
        _check(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def parse(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError([f"<yaml>: {e}"]) from None
    return from_dict(data or {})


def load(path: str) -> ExperimentConfig:
    if path == "default":
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if not (isinstance(obj, WorldSpec) and f.name == "seed")}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def dump(cfg: ExperimentConfig) -> str:
    """Canonical text: every field present, keys sorted, block style."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Replace top-level fields and re-validate."""
    data = to_dict(cfg)
    for k, v in changes.items():
        data[k] = _plain(v)
    return from_dict(data)
