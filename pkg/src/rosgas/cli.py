"""Command-line entry point.

Every command reads one JSON config made of blocks (``synth``, ``train``,
``agent``, ``paths``, ``run``, ``ablate``, ``probe``); any key can be
overridden with ``--set block.key=value`` and ``--seed`` overrides both the
generator and the training seed. All outputs land under ``paths.out_dir``.

Exit codes: 0 success, 2 config error, 3 infeasible run, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gnn, plotting
from .gnn import CheckpointError
from .hetgraph import GraphError, HetGraph, read_jsonl, write_jsonl
from .rl import AgentConfig, DQNAgent, agent_arrays, load_agent_arrays
from .synthgen import ConfigError, SynthConfig, generate, make_folds, write_truth
from .trainer import (VARIANTS, Environment, GreedyPolicy, InfeasibleRun, TrainConfig, embedding_quality,
                      layer_probe, predict_targets, run)

log = logging.getLogger("rosgas")

EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CHECKPOINT = 2, 3, 4

EXTRA_DEFAULTS = {
    "paths": {"graph_in": None, "out_dir": "out"},
    "run": {"folds": 1},
    "ablate": {"variants": list(VARIANTS), "seeds": [0, 1, 2, 3, 4]},
    "probe": {"targets": 20, "runs": 100, "epochs": None},
}


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def default_config() -> dict:
    return {
        "synth": asdict(SynthConfig()),
        "train": asdict(TrainConfig()),
        "agent": asdict(AgentConfig()),
        **json.loads(json.dumps(EXTRA_DEFAULTS)),
    }


def _merge(base: dict, user: dict) -> dict:
    out = json.loads(json.dumps(base))
    for block, vals in user.items():
        if block not in out:
            raise CliError(f"unknown config block {block!r}; expected one of {sorted(out)}")
        if not isinstance(vals, dict):
            raise CliError(f"config block {block!r} must be an object")
        unknown = set(vals) - set(out[block])
        if unknown:
            raise CliError(f"unknown keys in {block!r}: {sorted(unknown)}")
        out[block].update(vals)
    return out


def _parse_set(item: str) -> dict:
    key, sep, raw = item.partition("=")
    block, dot, name = key.partition(".")
    if not sep or not dot or not name:
        raise CliError(f"--set expects block.key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {block: {name: value}}


def load_config(path: str | None, sets=(), seed: int | None = None) -> dict:
    cfg = default_config()
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"malformed config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise CliError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for item in sets:
        cfg = _merge(cfg, _parse_set(item))
    if seed is not None:
        cfg["synth"]["seed"] = cfg["train"]["seed"] = int(seed)
    try:
        SynthConfig.from_dict(cfg["synth"]).validate()
        TrainConfig.from_dict(cfg["train"])
        AgentConfig.from_dict(cfg["agent"]).validate()
    except InfeasibleRun:
        raise
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc)) from None
    return cfg


def _train_cfg(cfg: dict, **over) -> TrainConfig:
    tc = TrainConfig.from_dict({**cfg["train"], **over})
    try:
        tc.validate()
    except InfeasibleRun as exc:
        raise CliError(str(exc), EXIT_INFEASIBLE) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return tc


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_graph(cfg: dict, seed: int | None = None) -> HetGraph:
    """The graph named by ``paths.graph_in``; without one, a graph is generated
    from the ``synth`` block (seeded by ``seed`` when given)."""
    path = cfg["paths"]["graph_in"]
    if path:
        if not Path(path).exists():
            raise CliError(f"graph file {path} does not exist")
        try:
            return read_jsonl(path)
        except (GraphError, KeyError, ValueError, TypeError) as exc:
            raise CliError(f"cannot load graph {path}: {exc}") from None
    sc = SynthConfig.from_dict({**cfg["synth"], **({} if seed is None else {"seed": seed})})
    return generate(sc)[0]


def _with_fold(g: HetGraph, n_folds: int, fold: int, seed: int) -> HetGraph:
    try:
        train, val, test = make_folds(g, n_folds, seed)[fold]
    except GraphError as exc:
        raise CliError(str(exc), EXIT_INFEASIBLE) from None
    return g.with_masks(train, val, test)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict) -> int:
    out = _out_dir(cfg)
    sc = SynthConfig.from_dict(cfg["synth"])
    g, cls = generate(sc)
    write_jsonl(g, out / "graph.jsonl")
    write_truth(cls, out / "truth.json")
    n_bot = int((g.labels == 1).sum())
    print(f"nodes={g.n_nodes} edges={g.n_edges} labeled={len(g.targets)} "
          f"(bots={n_bot}, benign={len(g.targets) - n_bot}) -> {out / 'graph.jsonl'}")
    return 0


def _save_run(result, out: Path, cfg: dict, seconds: float) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    gnn.save_stack(result.stack, out / "gnn.ckpt")
    width, depth = result.agents
    for name, role, agent in (("agent1.ckpt", "width", width), ("agent2.ckpt", "depth", depth)):
        path = out / name
        if agent is not None:
            gnn.save_arrays(agent_arrays(agent), path,
                            {"role": role, "n_actions": agent.n_actions, "state_dim": agent.pred.in_dim})
        elif path.exists():
            path.unlink()
    (out / "metrics.jsonl").write_text(result.log.to_jsonl())
    summary = result.summary()
    _dump_json(summary, out / "summary.json")
    _dump_json({"seconds": round(seconds, 3)}, out / "runtime.json")
    _dump_json(cfg, out / "config.json")
    plotting.plot_training(result.log.records, out / "training.png")
    return summary


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    tc = _train_cfg(cfg)
    ac = AgentConfig.from_dict(cfg["agent"])
    g = load_graph(cfg)
    n_folds = int(cfg["run"]["folds"])
    if n_folds < 1 or n_folds == 2:
        # each fold holds out one chunk for test and the next for validation
        raise CliError("run.folds must be 1 or at least 3")
    if n_folds == 1:
        g = _with_fold(g, 5, 0, tc.seed)
        t0 = time.perf_counter()
        result = _run(g, tc, ac)
        s = _save_run(result, out, cfg, time.perf_counter() - t0)
        print(f"{tc.variant} seed={tc.seed} test={s['test_accuracy']:.4f} val={s['val_accuracy']:.4f}")
        return 0
    accs = []
    for fold in range(n_folds):
        gf = _with_fold(g, n_folds, fold, tc.seed)
        t0 = time.perf_counter()
        result = _run(gf, tc, ac)
        s = _save_run(result, out / f"fold_{fold}", {**cfg, "run": {"folds": n_folds, "fold": fold}},
                      time.perf_counter() - t0)
        accs.append(s["test_accuracy"])
        print(f"fold {fold}: test={s['test_accuracy']:.4f}")
    agg = {"variant": tc.variant, "seed": tc.seed, "folds": n_folds, "test_accuracies": accs,
           "mean": float(np.mean(accs)), "std": float(np.std(accs))}
    _dump_json(agg, out / "aggregate.json")
    print(f"{tc.variant} {n_folds}-fold test accuracy {agg['mean']:.4f} +/- {agg['std']:.4f}")
    return 0


def _run(g: HetGraph, tc: TrainConfig, ac: AgentConfig):
    try:
        return run(g, tc, ac)
    except InfeasibleRun as exc:
        raise CliError(str(exc), EXIT_INFEASIBLE) from None


def _ablate_one(job) -> dict:
    cfg, variant, seed = job
    g = load_graph(cfg, seed=seed)
    tc = _train_cfg(cfg, variant=variant, seed=seed)
    g = _with_fold(g, 5, 0, seed)
    res = _run(g, tc, AgentConfig.from_dict(cfg["agent"]))
    return {"variant": variant, "seed": seed, "test_accuracy": res.test_acc, "val_accuracy": res.val_acc}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ROSGAS_THREADS", "1")))
    except ValueError:
        raise CliError("ROSGAS_THREADS must be an integer") from None


ABLATE_COLUMNS = ["variant", "seed", "test_accuracy", "val_accuracy", "test_std", "val_std"]


def cmd_ablate(cfg: dict) -> int:
    out = _out_dir(cfg)
    variants, seeds = cfg["ablate"]["variants"], [int(s) for s in cfg["ablate"]["seeds"]]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants or not seeds:
        raise CliError(f"ablate needs variants from {VARIANTS} and at least one seed (bad: {bad})")
    jobs = [(cfg, v, s) for s in seeds for v in variants]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_ablate_one, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_ablate_one(job))
            r = rows[-1]
            print(f"{r['variant']:>8} seed={r['seed']} test={r['test_accuracy']:.4f}", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
        for v in variants:
            t = [r["test_accuracy"] for r in rows if r["variant"] == v]
            va = [r["val_accuracy"] for r in rows if r["variant"] == v]
            w.writerow({"variant": v, "seed": "aggregate", "test_accuracy": np.mean(t),
                        "val_accuracy": np.mean(va), "test_std": np.std(t), "val_std": np.std(va)})
            print(f"{v:>8} mean test {np.mean(t):.4f} +/- {np.std(t):.4f}")
    plotting.plot_ablation(rows, out / "ablation.png")
    return 0


PROBE_COLUMNS = ["target_id", "ratio_l1", "ratio_l2", "ratio_l3", "agent_choice", "match"]


def cmd_probe(cfg: dict) -> int:
    out = _out_dir(cfg)
    tc = _train_cfg(cfg)
    if tc.l_max != 3:
        raise CliError("the probe table has fixed ratio_l1..ratio_l3 columns; keep l_max = 3")
    opts = cfg["probe"]
    g = _with_fold(load_graph(cfg), 5, 0, tc.seed)
    result = _run(g, tc, AgentConfig.from_dict(cfg["agent"]))
    env, policy = result.env, result.policy
    pool = np.concatenate([env.g.val, env.g.test])
    rng = np.random.default_rng([tc.seed, 21])
    targets = rng.choice(pool, size=min(int(opts["targets"]), len(pool)), replace=False)
    rows = layer_probe(env, tc, targets, int(opts["runs"]),
                       lambda t: policy(t)[0], lambda t: policy(t)[1],
                       None if opts["epochs"] is None else int(opts["epochs"]))
    with open(out / "probe.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, PROBE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    plotting.plot_probe(rows, out / "probe.png")
    rate = float(np.mean([r["match"] for r in rows]))
    print(f"agent depth in per-target argmax set for {rate:.0%} of {len(rows)} targets")
    return 0


def _load_agent(path: Path, state_dim: int, n_actions: int, ac: AgentConfig, use_nn: bool) -> DQNAgent:
    arrays, _ = gnn.load_arrays(path)
    agent = DQNAgent(state_dim, n_actions, ac, seed=0, use_nn=use_nn)
    load_agent_arrays(agent, arrays)
    return agent


def cmd_export_emb(cfg: dict, checkpoint: str | None = None) -> int:
    out = _out_dir(cfg)
    tc = _train_cfg(cfg)
    ac = AgentConfig.from_dict(cfg["agent"])
    g = _with_fold(load_graph(cfg), 5, 0, tc.seed)
    env = Environment(g, tc)
    ckpt = Path(checkpoint) if checkpoint else out / "gnn.ckpt"
    stack = gnn.load_stack(ckpt, expect_in_dim=env.g.dim)
    if stack.n_layers != tc.l_max:
        raise CheckpointError(f"checkpoint has {stack.n_layers} layers, config l_max={tc.l_max}")
    width = depth = None
    if tc.searches_k:
        width = _load_agent(ckpt.parent / "agent1.ckpt", env.g.dim, tc.k_max, ac, tc.uses_nn)
    if tc.searches_l:
        depth = _load_agent(ckpt.parent / "agent2.ckpt", env.g.dim, tc.l_max, ac, tc.uses_nn)
    policy = GreedyPolicy(env, width, depth, tc.fixed_k, tc.fixed_l)
    targets = sorted(int(t) for t in env.g.targets)
    _, Z = predict_targets(stack, env, targets, policy, tc.gnn_batch)
    labels = env.g.labels[targets]
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_id", "label"] + [f"z_{i + 1}" for i in range(Z.shape[1])])
        for t, y, z in zip(targets, labels, Z):
            w.writerow([env.original_id(t), int(y)] + [repr(float(v)) for v in z])
    score = embedding_quality(Z, labels, seed=tc.seed)
    _dump_json({"homogeneity": score, "n_targets": len(targets)}, out / "embeddings_score.json")
    print(f"homogeneity={score:.6f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _defaults_epilog() -> str:
    lines = ["config defaults (block.key = value):"]
    for block, vals in default_config().items():
        for k, v in vals.items():
            lines.append(f"  {block}.{k} = {json.dumps(v)}")
    lines.append("probe.epochs = null retrains for train.gnn_epochs")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                        help="override one config value (JSON-parsed, repeatable)")
    common.add_argument("--seed", type=int, help="override synth.seed and train.seed")
    common.add_argument("--out", help="override paths.out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rosgas", description=__doc__.split("\n\n")[0],
                                epilog=_defaults_epilog(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic graph and truth sidecar")
    t = sub.add_parser("train", parents=[common], help="search, retrain and evaluate one variant")
    t.add_argument("--folds", type=int, help="k-fold cross-validation (overrides run.folds)")
    sub.add_parser("ablate", parents=[common], help="variants x seeds accuracy table")
    sub.add_parser("probe", parents=[common], help="per-target depth probe")
    e = sub.add_parser("export-emb", parents=[common], help="write target embeddings and homogeneity")
    e.add_argument("--checkpoint", help="GNN checkpoint (default: <out_dir>/gnn.ckpt)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sets = list(args.set)
        if args.out:
            sets.append(f"paths.out_dir={json.dumps(args.out)}")
        if getattr(args, "folds", None) is not None:
            sets.append(f"run.folds={args.folds}")
        cfg = load_config(args.config, sets, args.seed)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "probe":
            return cmd_probe(cfg)
        return cmd_export_emb(cfg, args.checkpoint)
    except CliError as exc:
        print(f"rosgas: error: {exc}", file=sys.stderr)
        return exc.code
    except InfeasibleRun as exc:
        print(f"rosgas: infeasible run: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CheckpointError as exc:
        print(f"rosgas: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, GraphError) as exc:
        print(f"rosgas: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
