"""End-to-end search loop, final retraining, evaluation and diagnostics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import gnn
from . import numcore as nc
from .hetgraph import DEFAULT_METAPATHS, HetGraph, Subgraph, extract_subgraph, filter_by_metapaths, transition_distribution
from .rl import (AgentConfig, DQNAgent, Transition, alpha_at, binary_reward, dqn_step, encode_state,
                 epsilon_at, reward_measure)

log = logging.getLogger(__name__)

VARIANTS = ("K", "L", "KL", "KL-NN", "FULL", "BASELINE")


class InfeasibleRun(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k_init: int = 1
    k_max: int = 2
    l_max: int = 3
    gnn_batch: int = 64              # B_G
    episodes: int = 20
    steps_per_episode: int | None = None   # T; None means |train| // 4
    gnn_lr: float = 0.05
    lam: float = 0.01
    gnn_epochs: int = 30
    flush_epochs: int = 5
    margin: float = 0.1
    ssl_loss_form: str = "as_printed"
    heads: int = 2
    attention_relevance: str = "center"
    probe_size: int = 64
    fixed_k: int = 2
    fixed_l: int = 3
    use_metapaths: bool = True
    seed: int = 0
    variant: str = "FULL"

    @property
    def searches_k(self) -> bool:
        return self.variant in ("K", "KL", "KL-NN", "FULL")

    @property
    def searches_l(self) -> bool:
        return self.variant in ("L", "KL", "KL-NN", "FULL")

    @property
    def uses_nn(self) -> bool:
        return self.variant in ("KL-NN", "FULL")

    @property
    def uses_ssl(self) -> bool:
        return self.variant == "FULL"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.attention_relevance not in ("center", "overlap"):
            raise ValueError(f"unknown attention_relevance {self.attention_relevance!r}")
        if self.ssl_loss_form not in ("as_printed", "standard_hinge"):
            raise ValueError(f"unknown ssl_loss_form {self.ssl_loss_form!r}")
        if self.k_max < 1 or self.l_max < 1 or self.k_init < 0:
            raise ValueError("k_max and l_max must be >= 1, k_init >= 0")
        if not 1 <= self.fixed_k <= self.k_max or not 1 <= self.fixed_l <= self.l_max:
            raise ValueError("fixed_k/fixed_l must lie inside the search ranges")
        if min(self.gnn_batch, self.episodes, self.gnn_epochs, self.probe_size) < 1:
            raise ValueError("batch size, episodes, epochs and probe size must be >= 1")
        if self.uses_ssl and self.k_max < 2:
            raise InfeasibleRun("the FULL variant needs k_max >= 2 for positive samples")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# environment and policies


class Environment:
    """Meta-path-filtered graph plus caches of subgraphs, adjacencies and states."""

    def __init__(self, g: HetGraph, cfg: TrainConfig):
        self.g = filter_by_metapaths(g, DEFAULT_METAPATHS) if cfg.use_metapaths else g
        self.cfg = cfg
        self._subs: dict[tuple[int, int], Subgraph] = {}
        self._states: dict[int, np.ndarray] = {}
        self.adj_cache: dict = {}

    def sub(self, target: int, k: int) -> Subgraph:
        key = (int(target), int(k))
        if key not in self._subs:
            self._subs[key] = extract_subgraph(self.g, int(target), int(k))
        return self._subs[key]

    def extract(self, g: HetGraph, target: int, k: int) -> Subgraph:
        return self.sub(target, k)

    def state(self, target: int) -> np.ndarray:
        if target not in self._states:
            self._states[target] = encode_state(self.sub(target, self.cfg.k_init))
        return self._states[target]

    @property
    def train(self) -> np.ndarray:
        return self.g.train

    def original_id(self, node: int) -> int:
        return int(self.g.node_ids[node])


Policy = Callable[[int], tuple[int, int]]


class FixedPolicy:
    def __init__(self, k: int, l: int):
        self.k, self.l = k, l

    def __call__(self, target: int) -> tuple[int, int]:
        return self.k, self.l


class GreedyPolicy:
    """Width/depth from frozen agents (epsilon = 0); fixed values where a
    dimension is not searched."""

    def __init__(self, env: Environment, width_agent: DQNAgent | None, depth_agent: DQNAgent | None,
                 fixed_k: int, fixed_l: int):
        self.env, self.width_agent, self.depth_agent = env, width_agent, depth_agent
        self.fixed_k, self.fixed_l = fixed_k, fixed_l

    def __call__(self, target: int) -> tuple[int, int]:
        s = self.env.state(target)
        k = self.width_agent.greedy(s) + 1 if self.width_agent else self.fixed_k
        l = self.depth_agent.greedy(s) + 1 if self.depth_agent else self.fixed_l
        return k, l


# ---------------------------------------------------------------------------
# GNN training and evaluation


def train_batch(stack: gnn.GnnStack, env: Environment, items: Sequence[tuple[int, int, int]],
                cfg: TrainConfig, pairs: Sequence[tuple[Subgraph, Subgraph]] | None = None) -> float:
    """One Adam step on ``(target, k, l)`` items; ``pairs`` adds the pretext term."""
    subs = [env.sub(t, k) for t, k, _ in items]
    layers = [l for _, _, l in items]
    mode = cfg.attention_relevance
    _, z = gnn.subgraph_embeddings(stack, subs, layers, env.adj_cache, mode)
    logits = gnn.classify(stack, z)
    labels = env.g.labels[[t for t, _, _ in items]]
    ssl_terms = None
    if pairs is not None:
        _, z_pos = gnn.subgraph_embeddings(stack, [p for p, _ in pairs], layers, env.adj_cache, mode)
        _, z_neg = gnn.subgraph_embeddings(stack, [n for _, n in pairs], layers, env.adj_cache, mode)
        ssl_terms = gnn.ssl_loss(z, z_pos, z_neg, cfg.margin, cfg.ssl_loss_form)
    loss = gnn.total_loss(logits, labels, ssl_terms, cfg.lam, stack.parameters())
    nc.backward(loss)
    nc.adam_step(stack.parameters(), cfg.gnn_lr)
    return loss.item()


def make_pairs(env: Environment, items, cfg: TrainConfig, rng: np.random.Generator):
    return [gnn.ssl_sample(env.g, t, k, env.g.targets, cfg.k_max, rng, env.extract) for t, k, _ in items]


def predict_targets(stack: gnn.GnnStack, env: Environment, targets: Sequence[int],
                    assign: Callable[[int], tuple[int, int]], batch_size: int):
    """Return (predictions, final embeddings) for ``targets`` in the given order."""
    preds, embs = [], []
    targets = list(targets)
    for lo in range(0, len(targets), batch_size):
        chunk = targets[lo:lo + batch_size]
        kl = [assign(t) for t in chunk]
        subs = [env.sub(t, k) for t, (k, _) in zip(chunk, kl)]
        _, z = gnn.subgraph_embeddings(stack, subs, [l for _, l in kl], env.adj_cache,
                                       env.cfg.attention_relevance)
        preds.append(gnn.predict(gnn.classify(stack, z)))
        embs.append(z.value)
    if not targets:
        return np.zeros(0, dtype=np.int8), np.zeros((0, stack.hidden))
    return np.concatenate(preds), np.vstack(embs)


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    tp = int(((pred == 1) & (truth == 1)).sum())
    tn = int(((pred == 0) & (truth == 0)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    total = tp + tn + fp + fn
    if total == 0:
        raise ValueError("accuracy over an empty set")
    return (tp + tn) / total


def evaluate(env: Environment, stack: gnn.GnnStack, policy: Policy, mask: Sequence[int],
             batch_size: int = 64) -> float:
    mask = sorted(int(t) for t in mask)
    if not mask:
        raise ValueError("empty evaluation mask")
    pred, _ = predict_targets(stack, env, mask, policy, batch_size)
    return accuracy(pred, env.g.labels[mask])


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def search_steps(self) -> list[dict]:
        return [r for r in self.records if r.get("phase") == "search"]

    def episode_mean_acc(self) -> list[float]:
        by_ep: dict[int, list[float]] = {}
        for r in self.search_steps():
            by_ep.setdefault(r["episode"], []).append(r["val_acc"])
        return [float(np.mean(by_ep[e])) for e in sorted(by_ep)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class RunResult:
    cfg: TrainConfig
    env: Environment
    stack: gnn.GnnStack
    search_stack: gnn.GnnStack | None
    agents: tuple[DQNAgent | None, DQNAgent | None]
    policy: Policy
    log: MetricsLog
    test_acc: float
    val_acc: float

    def summary(self) -> dict:
        choices: dict[str, int] = {}
        for t in self.env.g.targets:
            k, l = self.policy(int(t))
            key = f"k{k}_l{l}"
            choices[key] = choices.get(key, 0) + 1
        return {
            "variant": self.cfg.variant,
            "seed": self.cfg.seed,
            "test_accuracy": self.test_acc,
            "val_accuracy": self.val_acc,
            "n_train": int(len(self.env.g.train)),
            "n_val": int(len(self.env.g.val)),
            "n_test": int(len(self.env.g.test)),
            "policy_choices": dict(sorted(choices.items())),
        }


# ---------------------------------------------------------------------------
# search loop


def _rng(seed: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *extra])


def steps_per_episode(env: Environment, cfg: TrainConfig) -> int:
    if cfg.steps_per_episode is not None:
        return int(cfg.steps_per_episode)
    return max(1, len(env.train) // 4)


def _check_feasible(g: HetGraph, cfg: TrainConfig) -> None:
    cfg.validate()
    if len(g.train) == 0 or len(g.val) == 0 or len(g.test) == 0:
        raise InfeasibleRun("train, val and test masks must all be nonempty")
    if cfg.uses_ssl and len(g.targets) < 2:
        raise InfeasibleRun("self-supervision needs at least two targets")
    if cfg.variant != "BASELINE" and len(g.targets) < cfg.gnn_batch:
        raise InfeasibleRun(f"{len(g.targets)} labeled targets cannot fill a GNN batch of {cfg.gnn_batch}")


def run_training(env: Environment, cfg: TrainConfig, agent_cfg: AgentConfig,
                 log_: MetricsLog | None = None):
    """The search phase: joint width/depth actions, buffered GNN training,
    probe-accuracy rewards and DQN updates. Returns (stack, agents, log)."""
    _check_feasible(env.g, cfg)
    agent_cfg.validate()
    metrics = log_ if log_ is not None else MetricsLog()
    g = env.g
    train = np.asarray(env.train)
    dim = g.dim
    stack = gnn.GnnStack(dim, cfg.l_max, cfg.heads, seed=int(_rng(cfg.seed, 1).integers(2**31)))
    width = DQNAgent(dim, cfg.k_max, agent_cfg, seed=int(_rng(cfg.seed, 2).integers(2**31)),
                     use_nn=cfg.uses_nn) if cfg.searches_k else None
    depth = DQNAgent(dim, cfg.l_max, agent_cfg, seed=int(_rng(cfg.seed, 3).integers(2**31)),
                     use_nn=cfg.uses_nn) if cfg.searches_l else None
    act_rng, walk_rng, replay_rng = _rng(cfg.seed, 4), _rng(cfg.seed, 5), _rng(cfg.seed, 6)
    probe_rng = _rng(cfg.seed, 8)
    val = np.asarray(sorted(g.val))
    probe = np.sort(probe_rng.choice(val, size=min(cfg.probe_size, len(val)), replace=False))

    T = steps_per_episode(env, cfg)
    total = cfg.episodes * T
    buffers: dict[int, list[tuple[int, int, int]]] = {l: [] for l in range(1, cfg.l_max + 1)}
    history: list[float] = []
    r_prev = 0.0
    step = 0

    def flush(l: int) -> float:
        items = buffers[l]
        pairs = make_pairs(env, items, cfg, _rng(cfg.seed, 7, step)) if cfg.uses_ssl else None
        loss = 0.0
        for _ in range(cfg.flush_epochs):
            loss = train_batch(stack, env, items, cfg, pairs)
        buffers[l] = []
        return loss

    for episode in range(cfg.episodes):
        alpha = alpha_at(episode, agent_cfg.alpha0, agent_cfg.beta) if cfg.uses_nn else 0.0
        target = int(walk_rng.choice(train))
        s = env.state(target)
        for t in range(T):
            eps = epsilon_at(step, total, agent_cfg)
            a1 = width.act(s, eps, act_rng) if width else cfg.fixed_k - 1
            a2 = depth.act(s, eps, act_rng) if depth else cfg.fixed_l - 1
            k, l = a1 + 1, a2 + 1
            sub = env.sub(target, k)
            buffers[l].append((target, k, l))
            gnn_loss = flush(l) if len(buffers[l]) >= cfg.gnn_batch else None

            pred, _ = predict_targets(stack, env, probe, lambda _t: (k, l), cfg.gnn_batch)
            acc = accuracy(pred, g.labels[probe])
            R = reward_measure(history, acc, agent_cfg.reward_window, agent_cfg.reward_mean_form)
            r = binary_reward(R, r_prev)
            history.append(acc)
            r_prev = R

            p = transition_distribution(g, sub, train)
            nxt = int(train[walk_rng.choice(len(train), p=p)])
            s_next = env.state(nxt)
            losses = {}
            for name, agent, a in (("width", width, a1), ("depth", depth, a2)):
                if agent is None:
                    continue
                agent.observe(Transition(s, a, s_next, r))
                vals = [dqn_step(agent, agent.replay.sample(agent_cfg.batch_size, replay_rng), alpha)
                        for _ in range(agent_cfg.train_steps)]
                losses[name] = float(np.mean(vals))
            metrics.append(phase="search", episode=episode, step=t, target=env.original_id(target),
                           k=k, l=l, epsilon=eps, val_acc=acc, R=R, reward=r,
                           dqn_loss_width=losses.get("width"), dqn_loss_depth=losses.get("depth"),
                           gnn_loss=gnn_loss)
            s, target = s_next, nxt
            step += 1
        policy = GreedyPolicy(env, width, depth, cfg.fixed_k, cfg.fixed_l)
        ep_acc = evaluate(env, stack, policy, g.val, cfg.gnn_batch)
        metrics.append(phase="episode_end", episode=episode, val_acc_greedy=ep_acc)
        log.debug("episode %d: greedy val acc %.3f", episode, ep_acc)

    for l in buffers:
        if buffers[l]:
            metrics.append(phase="final_flush", layers=l, gnn_loss=flush(l))
    return stack, (width, depth), metrics


def final_retrain(env: Environment, cfg: TrainConfig, policy: Policy,
                  metrics: MetricsLog | None = None) -> gnn.GnnStack:
    """Fresh stack trained for ``gnn_epochs`` with per-target widths/depths
    taken from ``policy``."""
    stack = gnn.GnnStack(env.g.dim, cfg.l_max, cfg.heads, seed=int(_rng(cfg.seed, 11).integers(2**31)))
    rng = _rng(cfg.seed, 12)
    assigned = {int(t): policy(int(t)) for t in env.train}
    for epoch in range(cfg.gnn_epochs):
        order = rng.permutation(np.asarray(env.train))
        losses = []
        for l in range(1, cfg.l_max + 1):
            group = [(int(t), assigned[int(t)][0], l) for t in order if assigned[int(t)][1] == l]
            for lo in range(0, len(group), cfg.gnn_batch):
                items = group[lo:lo + cfg.gnn_batch]
                pairs = make_pairs(env, items, cfg, rng) if cfg.uses_ssl else None
                losses.append(train_batch(stack, env, items, cfg, pairs))
        if metrics is not None:
            metrics.append(phase="retrain", epoch=epoch, gnn_loss=float(np.sum(losses)))
    return stack


def run(g: HetGraph, cfg: TrainConfig, agent_cfg: AgentConfig | None = None) -> RunResult:
    """Search (unless BASELINE), retrain from scratch, score val and test."""
    agent_cfg = agent_cfg or AgentConfig()
    _check_feasible(g, cfg)
    env = Environment(g, cfg)
    metrics = MetricsLog()
    if cfg.variant == "BASELINE":
        search_stack, agents = None, (None, None)
        policy: Policy = FixedPolicy(cfg.fixed_k, cfg.fixed_l)
    else:
        search_stack, agents, _ = run_training(env, cfg, agent_cfg, metrics)
        policy = GreedyPolicy(env, agents[0], agents[1], cfg.fixed_k, cfg.fixed_l)
    stack = final_retrain(env, cfg, policy, metrics)
    val_acc = evaluate(env, stack, policy, env.g.val, cfg.gnn_batch)
    test_acc = evaluate(env, stack, policy, env.g.test, cfg.gnn_batch)
    return RunResult(cfg, env, stack, search_stack, agents, policy, metrics, test_acc, val_acc)


# ---------------------------------------------------------------------------
# diagnostics


def layer_probe(env: Environment, cfg: TrainConfig, targets: Sequence[int], runs: int,
                width_policy: Callable[[int], int], depth_choice: Callable[[int], int],
                epochs: int | None = None) -> list[dict]:
    """Per-target share of runs classified correctly by fixed-depth stacks,
    compared with the agent's greedy depth."""
    targets = [int(t) for t in sorted(targets)]
    widths = {int(t): width_policy(int(t)) for t in env.train}
    widths.update({t: width_policy(t) for t in targets})
    correct = np.zeros((len(targets), cfg.l_max))
    run_cfg = TrainConfig(**{**asdict(cfg), "gnn_epochs": epochs or cfg.gnn_epochs})
    truth = env.g.labels[targets]
    for r in range(runs):
        for l in range(1, cfg.l_max + 1):
            c = TrainConfig(**{**asdict(run_cfg), "seed": cfg.seed * 100_003 + r, "variant": "BASELINE"})
            policy = lambda t, l=l: (widths[int(t)], l)
            stack = final_retrain(env, c, policy)
            pred, _ = predict_targets(stack, env, targets, policy, cfg.gnn_batch)
            correct[:, l - 1] += pred == truth
    ratios = correct / runs
    rows = []
    for i, t in enumerate(targets):
        best = np.flatnonzero(ratios[i] == ratios[i].max()) + 1
        choice = int(depth_choice(t))
        rows.append({"target_id": env.original_id(t),
                     **{f"ratio_l{l}": float(ratios[i, l - 1]) for l in range(1, cfg.l_max + 1)},
                     "agent_choice": choice, "match": bool(choice in best)})
    return rows


def homogeneity(labels, clusters) -> float:
    """1 - H(class | cluster) / H(class); 1.0 when there is a single class."""
    labels, clusters = np.asarray(labels), np.asarray(clusters)
    n = len(labels)
    classes, class_idx = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        return 1.0
    _, clus_idx = np.unique(clusters, return_inverse=True)
    table = np.zeros((classes.size, clus_idx.max() + 1))
    np.add.at(table, (class_idx, clus_idx), 1)
    pc = table.sum(axis=1) / n
    h_class = -np.sum(pc * np.log(pc))
    h_cond = 0.0
    for j in range(table.shape[1]):
        col = table[:, j]
        nz = col[col > 0]
        h_cond -= np.sum(nz / n * np.log(nz / col.sum()))
    return float(1.0 - h_cond / h_class)


def embedding_quality(embeddings: np.ndarray, labels, seed: int = 0) -> float:
    """Homogeneity of a seeded 2-means clustering (10 restarts) of ``embeddings``."""
    from sklearn.cluster import KMeans

    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) < 2:
        raise ValueError("need at least two points")
    if len(np.unique(labels)) < 2:
        return 1.0
    km = KMeans(n_clusters=2, n_init=10, random_state=seed).fit(embeddings)
    return homogeneity(labels, km.labels_)


def target_embeddings(result: RunResult, targets: Sequence[int] | None = None):
    env = result.env
    targets = sorted(int(t) for t in (env.g.targets if targets is None else targets))
    _, Z = predict_targets(result.stack, env, targets, result.policy, result.cfg.gnn_batch)
    return targets, env.g.labels[targets], Z
