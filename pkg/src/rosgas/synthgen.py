"""Seeded synthetic heterogeneous social graphs with planted bots.

Users follow each other by preferential attachment (with a configurable pull
towards same-class accounts), post tweets that carry hashtags and named
entities, write replies and retweet. Bots draw their own features and the
content they author from a mean-shifted Gaussian; some of them additionally
follow a popular benign account as structural camouflage.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .hetgraph import EdgeType, GraphError, HetGraph, NodeType


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_users: int = 2000
    bot_fraction: float = 0.3
    labeled_fraction: float = 0.05
    feature_dim: int = 16
    class_separation: float = 1.5
    camouflage_rate: float = 0.5
    tweets_per_user: float = 3.0
    hashtag_pool: int = 40
    entity_pool: int = 60
    follows_per_user: int = 2
    homophily: float = 0.6
    comments_per_user: float = 0.5
    retweets_per_user: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 10:
            raise ConfigError("n_users must be >= 10")
        if not 0.0 < self.bot_fraction < 1.0:
            raise ConfigError("bot_fraction must lie in (0, 1)")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if self.feature_dim < 4:
            raise ConfigError("feature_dim must be >= 4")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be >= 0")
        if not 0.0 <= self.camouflage_rate <= 1.0:
            raise ConfigError("camouflage_rate must lie in [0, 1]")
        if not 0.0 <= self.homophily <= 1.0:
            raise ConfigError("homophily must lie in [0, 1]")
        if self.follows_per_user < 1 or self.hashtag_pool < 1 or self.entity_pool < 1:
            raise ConfigError("follows_per_user, hashtag_pool and entity_pool must be >= 1")
        n_lab, n_bot_lab, n_ben_lab = self.label_counts()
        n_bots = self.n_bots()
        if n_lab < 2:
            raise ConfigError(f"only {n_lab} labeled users; need at least 2")
        if n_bot_lab < 1 or n_bot_lab > n_bots:
            raise ConfigError(f"cannot label {n_bot_lab} bots out of {n_bots}")
        if n_ben_lab > self.n_users - n_bots:
            raise ConfigError(f"cannot label {n_ben_lab} benign users out of {self.n_users - n_bots}")

    def n_bots(self) -> int:
        return int(round(self.bot_fraction * self.n_users))

    def label_counts(self) -> tuple[int, int, int]:
        n_lab = int(round(self.labeled_fraction * self.n_users))
        return n_lab, n_lab // 2, n_lab - n_lab // 2

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _zipf_weights(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _preferential_follows(rng, cls, m, homophily):
    n = len(cls)
    deg = np.zeros(n)
    edges = []
    for i in range(1, n):
        k = min(m, i)
        weights = deg[:i] + 1.0
        if homophily > 0:
            same = cls[:i] == cls[i]
            if same.any() and (~same).any():
                # split the mass so a `homophily` share lands on same-class users
                w_same = np.where(same, weights, 0.0)
                w_diff = np.where(same, 0.0, weights)
                base = (1 - homophily) * w_diff / w_diff.sum() + homophily * w_same / w_same.sum()
                weights = base
        p = weights / weights.sum()
        chosen = rng.choice(i, size=k, replace=False, p=p)
        for j in np.sort(chosen):
            edges.append((i, int(j)))
            deg[i] += 1
            deg[j] += 1
    return edges, deg


def generate(cfg: SynthConfig) -> tuple[HetGraph, np.ndarray]:
    """Return the graph and the ground-truth class of every user."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n_users, cfg.feature_dim
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)

    cls = np.zeros(n, dtype=np.int8)
    cls[rng.permutation(n)[:cfg.n_bots()]] = 1

    follows, deg = _preferential_follows(rng, cls, cfg.follows_per_user, cfg.homophily)
    benign = np.flatnonzero(cls == 0)
    hub_cut = np.quantile(deg[benign], 0.9)
    hubs = benign[deg[benign] >= hub_cut]
    existing = set(follows)
    for b in np.flatnonzero(cls == 1):
        if rng.random() < cfg.camouflage_rate:
            h = int(rng.choice(hubs))
            if (int(b), h) not in existing:
                follows.append((int(b), h))
                existing.add((int(b), h))

    types = [NodeType.User] * n
    author_cls = list(cls)     # class of whoever authored each node's content
    edges = [(u, v, EdgeType.Follow) for u, v in follows]

    tweet_of_user: list[list[int]] = [[] for _ in range(n)]
    tweets = []
    for u in range(n):
        for _ in range(rng.poisson(cfg.tweets_per_user)):
            t = len(types)
            types.append(NodeType.Tweet)
            author_cls.append(cls[u])
            edges.append((u, t, EdgeType.Post))
            tweet_of_user[u].append(t)
            tweets.append(t)

    followees: list[list[int]] = [[] for _ in range(n)]
    for u, v in follows:
        followees[u].append(v)

    comment_edges = []
    if tweets:
        for u in range(n):
            for _ in range(rng.poisson(cfg.comments_per_user)):
                pool = [t for f in followees[u] for t in tweet_of_user[f]]
                target = int(rng.choice(pool)) if pool else int(rng.choice(tweets))
                comment_edges.append((u, target))
    for u, target in comment_edges:
        c = len(types)
        types.append(NodeType.Comment)
        author_cls.append(cls[u])
        edges.append((u, c, EdgeType.Write))
        edges.append((c, target, EdgeType.Reply))

    for u in range(n):
        pool = [t for f in followees[u] for t in tweet_of_user[f]]
        if not pool:
            continue
        k = min(rng.poisson(cfg.retweets_per_user), len(pool))
        for t in rng.choice(pool, size=k, replace=False):
            edges.append((u, int(t), EdgeType.Retweet))

    hashtag_base = len(types)
    types += [NodeType.Hashtag] * cfg.hashtag_pool
    author_cls += [-1] * cfg.hashtag_pool
    entity_base = len(types)
    types += [NodeType.Entity] * cfg.entity_pool
    author_cls += [-1] * cfg.entity_pool
    h_w = _zipf_weights(cfg.hashtag_pool)
    e_w = _zipf_weights(cfg.entity_pool)
    for t in tweets:
        if rng.random() < 0.5:
            edges.append((t, hashtag_base + int(rng.choice(cfg.hashtag_pool, p=h_w)), EdgeType.Contain))
        if rng.random() < 0.3:
            edges.append((t, entity_base + int(rng.choice(cfg.entity_pool, p=e_w)), EdgeType.Contain))

    author_cls = np.array(author_cls)
    X = rng.standard_normal((len(types), d))
    X[author_cls == 1] += cfg.class_separation * direction

    labels = np.full(len(types), -1, dtype=np.int8)
    _, n_bot_lab, n_ben_lab = cfg.label_counts()
    bot_ids = rng.permutation(np.flatnonzero(cls == 1))[:n_bot_lab]
    ben_ids = rng.permutation(np.flatnonzero(cls == 0))[:n_ben_lab]
    labels[bot_ids] = 1
    labels[ben_ids] = 0

    g = HetGraph(
        np.array(types, dtype=np.int8),
        np.array([e[0] for e in edges], dtype=np.int64),
        np.array([e[1] for e in edges], dtype=np.int64),
        np.array([int(e[2]) for e in edges], dtype=np.int8),
        X, labels,
    )
    train, val, test = make_folds(g, 5, cfg.seed)[0]
    g.train, g.val, g.test = train, val, test
    g.check()
    return g, cls


def make_folds(g: HetGraph, n_folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stratified k-fold over the target set.

    Fold ``i`` tests on chunk ``i``, validates on chunk ``i + 1`` and trains on
    the rest, so the test chunks partition the targets.
    """
    D = g.targets
    if n_folds < 2:
        raise GraphError("need at least 2 folds")
    if len(D) < n_folds:
        raise GraphError(f"{len(D)} labeled users cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    ordered = []
    for c in (1, 0):
        members = D[g.labels[D] == c]
        ordered.extend(rng.permutation(members).tolist())
    chunks = [np.array(sorted(ordered[i::n_folds]), dtype=np.int64) for i in range(n_folds)]
    folds = []
    for i in range(n_folds):
        test = chunks[i]
        val = chunks[(i + 1) % n_folds]
        train = np.array(sorted(set(D.tolist()) - set(test.tolist()) - set(val.tolist())),
                         dtype=np.int64)
        folds.append((train, val, test))
    return folds


def write_truth(cls: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump({"labels": {str(i): int(c) for i, c in enumerate(cls)}}, fh)


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
