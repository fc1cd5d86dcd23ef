"""Command line entry point: ``fedmor run|sweep|report``.

Exit codes: 0 ok, 1 missing artifacts, 2 invalid configuration,
3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from collections import defaultdict

import numpy as np

from . import config as cfgmod
from .federation import (
    Ablations,
    ClientArtifacts,
    ledger_report,
    prepare_clients,
    rows_to_csv,
    run_alignment,
    scaling_table,
    Sizing,
)
from .grpo import STRATEGIES, checkpoint_to_json as policy_json
from .numerics import ContractError, TrainingDiverged, stream
from .privacy import mia_report
from .reward import checkpoint_to_json as rm_json
from .router import checkpoint_to_json as router_json
from .synthdata import generate_world, sample_client_pairs, world_to_json

EXIT_MISSING = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def run_label(strategy: str, ab: Ablations) -> str:
    flags = [f for f in cfgmod.ABLATIONS if getattr(ab, f)]
    return "+".join([strategy.replace(":", "-"), *flags])


def summary_row(cfg: cfgmod.ExperimentConfig, art: ClientArtifacts, metrics: dict) -> dict:
    row = {"strategy": run_label(cfg.strategy, cfg.ablations), "seed": cfg.seed}
    for k, u in enumerate(metrics["true_utility"]):
        row[f"utility_client_{k}"] = u
    row["mean_true_utility"] = metrics["mean_true_utility"]
    row["routing_accuracy"] = art.metrics.get("routing_accuracy")
    row["bytes_total"] = metrics["bytes_total"]
    return row


def _mia_rows(cfg, art: ClientArtifacts) -> list[dict]:
    n = cfg.report.mia_pairs
    tau = art.world.spec.preference_temperature
    members, nonmembers = [], []
    for c in art.world.clients:
        m = min(n, len(c))
        members.append(c.pairs.subset(np.arange(m)))
        nonmembers.append(sample_client_pairs(c, m, tau, stream(cfg.seed, f"client-{c.client_id}/mia-nonmember")))
    return mia_report(art.reward_models, members, nonmembers, cfg.report.mia_variants)


def _scaling_rows(cfg, art: ClientArtifacts) -> list[dict]:
    w = art.world.spec
    sizing = Sizing(w.context_dim, w.response_dim, cfg.protocol.raw_image_bytes)
    rm_params = art.reward_models[0].spec.num_params
    queries = cfg.grpo.total_steps * cfg.grpo.batch_size * cfg.grpo.group_size
    return scaling_table(cfg.report.k_sweep, sizing, cfg.router_fl.rounds, art.router.spec.num_params,
                         rm_params, queries, cfg.report.lora_params)


def execute(cfg: cfgmod.ExperimentConfig, out: str, art: ClientArtifacts | None = None,
            log=print) -> dict:
    """Run one configured experiment and write its artifacts under ``out``."""
    pcfg = cfg.protocol_config()
    if art is None:
        art = prepare_clients(generate_world(cfg.world_spec()), pcfg, cfg.seed)
    res = run_alignment(art, pcfg, cfg.strategy, cfg.ablations, seed=cfg.seed)
    log(f"[{run_label(cfg.strategy, cfg.ablations)} seed={cfg.seed}] "
        f"mean true utility {res.metrics['mean_true_utility']:.4f}, {res.metrics['bytes_total']} bytes")

    _write(os.path.join(out, "config.resolved.yaml"), cfgmod.dump(cfg))
    _write(os.path.join(out, "world.json"), world_to_json(art.world))
    for rm in art.reward_models:
        _write(os.path.join(out, "checkpoints", f"client-{rm.owner}-reward.json"), rm_json(rm))
    if art.router is not None:
        _write(os.path.join(out, "checkpoints", "router.json"), router_json(art.router))
    _write(os.path.join(out, "checkpoints", "policy.json"), policy_json(res.align.policy))
    _write(os.path.join(out, "trace.jsonl"), _jsonl(res.align.trace))
    bandit_path = os.path.join(out, "bandit_trace.jsonl")
    if res.align.bandit_trace:
        _write(bandit_path, _jsonl(res.align.bandit_trace))
    elif os.path.exists(bandit_path):
        os.remove(bandit_path)
    label = run_label(cfg.strategy, cfg.ablations)
    _write(os.path.join(out, "ledger.json"), res.ledger.to_json())
    _write(os.path.join(out, "ledger.csv"), rows_to_csv(ledger_report(res.ledger, label, art.world.spec.num_clients)))
    if art.router is not None:
        _write(os.path.join(out, "scaling.csv"), rows_to_csv(_scaling_rows(cfg, art)))
    _write(os.path.join(out, "mia.csv"), rows_to_csv(_mia_rows(cfg, art)))
    row = summary_row(cfg, art, res.metrics)
    _write(os.path.join(out, "summary.csv"), rows_to_csv([row]))
    metrics = {"summary": row, "clients": art.metrics, "run": res.metrics}
    _write(os.path.join(out, "metrics.json"), json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    return row


def _ablations(text: str | None) -> dict:
    if not text:
        return {}
    flags = {}
    for name in (t.strip() for t in text.split(",") if t.strip()):
        if name not in cfgmod.ABLATIONS:
            raise cfgmod.ConfigError([f"--ablate: unknown ablation {name!r} (choose from {', '.join(cfgmod.ABLATIONS)})"])
        flags[name] = True
    return flags


def _resolve(args, strategy: str | None = None) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config)
    changes = {}
    if strategy or getattr(args, "strategy", None):
        changes["strategy"] = strategy or args.strategy
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    ab = _ablations(args.ablate)
    if ab:
        changes["ablations"] = dataclasses.replace(cfg.ablations, **ab)
    return cfgmod.with_overrides(cfg, **changes)


def cmd_run(args) -> int:
    cfg = _resolve(args)
    execute(cfg, cfg.output_dir)
    return 0


def _sweep_strategies(text: str, K: int) -> list[str]:
    if text == "all":
        return [s for s in STRATEGIES if s != "best_single"] + [f"best_single:{k}" for k in range(K)]
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_sweep(args) -> int:
    base = _resolve(args, strategy="mor_sparse")
    strategies = _sweep_strategies(args.strategy or "all", base.world.num_clients)
    first = base.seed
    rows = []
    for seed in range(first, first + args.seeds):
        seeded = cfgmod.with_overrides(base, seed=seed)
        pcfg = seeded.protocol_config()
        art = prepare_clients(generate_world(seeded.world_spec()), pcfg, seed)
        for s in strategies:
            cfg = cfgmod.with_overrides(seeded, strategy=s)
            sub = os.path.join(base.output_dir, run_label(s, cfg.ablations), f"seed-{seed}")
            rows.append(execute(cfg, sub, art))
    rows = [_pad(r, rows) for r in rows]
    _write(os.path.join(base.output_dir, "summary.csv"), rows_to_csv(rows))
    print(render_report(aggregate_rows(rows)))
    return 0


def _pad(row, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    return {k: row.get(k) for k in keys}


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean and population std per strategy of every numeric column."""
    groups = defaultdict(list)
    for r in rows:
        groups[r["strategy"]].append(r)
    out = []
    for name, rs in groups.items():
        agg = {"strategy": name, "seeds": len(rs)}
        for key in rs[0]:
            if key in ("strategy", "seed"):
                continue
            vals = [float(r[key]) for r in rs if r.get(key) not in (None, "", "None")]
            if vals:
                agg[f"{key}_mean"] = float(np.mean(vals))
                agg[f"{key}_std"] = float(np.std(vals))
        out.append(agg)
    return sorted(out, key=lambda a: -a.get("mean_true_utility_mean", float("-inf")))


def render_report(agg: list[dict]) -> str:
    if not agg:
        return "(no runs)"
    keys = [k[:-5] for k in agg[0] if k.endswith("_mean")]
    head = ["strategy", "seeds"] + keys
    lines = [head]
    for a in agg:
        line = [a["strategy"], str(a["seeds"])]
        for k in keys:
            if f"{k}_mean" in a:
                line.append(f"{a[f'{k}_mean']:.4g} ± {a[f'{k}_std']:.2g}")
            else:
                line.append("-")
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)) for l in lines)


def _read_rows(directory: str) -> list[dict]:
    top = os.path.join(directory, "summary.csv")
    paths = [top] if os.path.exists(top) else sorted(
        os.path.join(root, "summary.csv") for root, _, files in os.walk(directory) if "summary.csv" in files)
    rows = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def cmd_report(args) -> int:
    directory = args.out or args.dir
    if not directory or not os.path.isdir(directory):
        print(f"error: no output directory {directory!r}", file=sys.stderr)
        return EXIT_MISSING
    rows = _read_rows(directory)
    if not rows:
        print(f"error: no summary.csv artifacts under {directory}", file=sys.stderr)
        return EXIT_MISSING
    agg = aggregate_rows(rows)
    text = render_report(agg)
    _write(os.path.join(directory, "report.csv"), rows_to_csv([_pad(a, agg) for a in agg]))
    _write(os.path.join(directory, "report.txt"), text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default="default", help="YAML config path, or 'default'")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--ablate", default=None, help="comma list of " + ", ".join(cfgmod.ABLATIONS))
        sp.add_argument("--out", default=None, help="output directory")

    r = sub.add_parser("run", help="run one strategy end to end")
    common(r)
    r.add_argument("--strategy", default=None)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run several strategies over consecutive seeds")
    common(s)
    s.add_argument("--strategy", default="all", help="'all' or a comma list")
    s.add_argument("--seeds", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="aggregate per-seed summaries")
    rep.add_argument("dir", nargs="?", default=None)
    rep.add_argument("--out", default=None)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"error: {e.what} diverged at step {e.step} (loss={e.loss})", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
