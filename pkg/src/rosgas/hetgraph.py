"""Heterogeneous social graph: storage, meta-path filtering, k-hop subgraphs,
and the target-to-target transition distribution used by the search MDP."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


class NodeType(enum.IntEnum):
    User = 0
    Tweet = 1
    Comment = 2
    Hashtag = 3
    Entity = 4


class EdgeType(enum.IntEnum):
    Follow = 0
    Post = 1
    Write = 2
    Reply = 3
    Retweet = 4
    Contain = 5


WALK_CAP = 1_000_000


@dataclass
class HetGraph:
    node_type: np.ndarray            # (n,) int8 of NodeType
    src: np.ndarray                  # (m,) int64
    dst: np.ndarray                  # (m,) int64
    rel: np.ndarray                  # (m,) int8 of EdgeType
    features: np.ndarray             # (n, d) float64
    labels: np.ndarray               # (n,) int8, -1 where unlabeled
    node_ids: np.ndarray | None = None   # original ids when the graph was filtered
    train: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = len(self.node_type)
        if self.node_ids is None:
            self.node_ids = np.arange(n, dtype=np.int64)
        self.targets = np.flatnonzero(self.labels >= 0).astype(np.int64)
        # undirected incidence: for node u, neighbors and the edge ids reaching them
        ends = np.concatenate([self.src, self.dst])
        others = np.concatenate([self.dst, self.src])
        eids = np.concatenate([np.arange(len(self.src))] * 2)
        order = np.lexsort((others, ends))
        self._indptr = np.searchsorted(ends[order], np.arange(n + 1)).astype(np.int64)
        self._nbr = others[order].astype(np.int64)
        self._nbr_eid = eids[order].astype(np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.node_type)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, u: int) -> np.ndarray:
        return self._nbr[self._indptr[u]:self._indptr[u + 1]]

    def incident_edges(self, u: int) -> np.ndarray:
        return self._nbr_eid[self._indptr[u]:self._indptr[u + 1]]

    def label_of(self, u: int) -> int:
        return int(self.labels[u])

    def with_masks(self, train, val, test) -> HetGraph:
        g = HetGraph(self.node_type, self.src, self.dst, self.rel, self.features, self.labels,
                     self.node_ids)
        g.train, g.val, g.test = (np.asarray(m, dtype=np.int64) for m in (train, val, test))
        g.check()
        return g

    def check(self) -> None:
        """Raise GraphError if any structural invariant is broken."""
        n = self.n_nodes
        if self.features.shape[0] != n:
            raise GraphError("feature rows do not match node count")
        if len(self.labels) != n:
            raise GraphError("label array does not match node count")
        if len(self.src) and (max(self.src.max(), self.dst.max()) >= n or
                              min(self.src.min(), self.dst.min()) < 0):
            raise GraphError("edge endpoint out of range")
        bad = (self.labels >= 0) & (self.node_type != NodeType.User)
        if bad.any():
            raise GraphError(f"label on non-User node {int(np.flatnonzero(bad)[0])}")
        tset = set(self.targets.tolist())
        masks = [set(m.tolist()) for m in (self.train, self.val, self.test)]
        for m in masks:
            if not m <= tset:
                raise GraphError("mask contains a node outside the target set")
        if masks[0] & masks[1] or masks[0] & masks[2] or masks[1] & masks[2]:
            raise GraphError("train/val/test masks overlap")
        degree = np.bincount(self.src, minlength=n) + np.bincount(self.dst, minlength=n)
        if not np.array_equal(np.diff(self._indptr), degree):
            raise GraphError("adjacency index out of sync with the edge list")


def build_graph(nodes: Sequence[NodeType | str], edges: Iterable[tuple], features,
                labels: dict[int, int] | None = None) -> HetGraph:
    """Assemble a HetGraph from typed nodes, ``(src, dst, rel)`` edges, one
    feature vector per node and a sparse ``{node: label}`` map."""
    node_type = np.array([_node_type(t) for t in nodes], dtype=np.int8)
    n = len(node_type)
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    if len(feats) != n:
        raise GraphError(f"{len(feats)} feature vectors for {n} nodes")
    dims = {f.shape for f in feats}
    if len(dims) > 1:
        raise GraphError(f"feature dimension mismatch: {sorted(dims)}")
    if n:
        X = np.vstack(feats)
        if X.ndim != 2:
            raise GraphError("feature vectors must be 1-D")
    else:
        X = np.zeros((0, 0))
    edges = list(edges)
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    rel = np.array([_edge_type(e[2]) for e in edges], dtype=np.int8)
    for u, v in zip(src.tolist(), dst.tolist()):
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge ({u}, {v}) references an unknown node")
    y = np.full(n, -1, dtype=np.int8)
    for u, lab in (labels or {}).items():
        if not 0 <= u < n:
            raise GraphError(f"label for unknown node {u}")
        if node_type[u] != NodeType.User:
            raise GraphError(f"label on non-User node {u}")
        if lab not in (0, 1):
            raise GraphError(f"labels are binary, got {lab}")
        y[u] = lab
    g = HetGraph(node_type, src, dst, rel, X, y)
    g.check()
    return g


def _node_type(t) -> NodeType:
    try:
        return NodeType[t] if isinstance(t, str) else NodeType(int(t))
    except (KeyError, ValueError):
        raise GraphError(f"unknown node type {t!r}") from None


def _edge_type(t) -> EdgeType:
    try:
        return EdgeType[t] if isinstance(t, str) else EdgeType(int(t))
    except (KeyError, ValueError):
        raise GraphError(f"unknown edge type {t!r}") from None


# ---------------------------------------------------------------------------
# meta-paths


@dataclass(frozen=True)
class MetaPath:
    steps: tuple[tuple[NodeType, EdgeType, NodeType], ...]

    def __post_init__(self):
        if not self.steps:
            raise GraphError("a meta-path needs at least one step")
        for (_, _, t_out), (t_in, _, _) in zip(self.steps, self.steps[1:]):
            if t_out != t_in:
                raise GraphError("meta-path steps do not chain")

    @classmethod
    def of(cls, *tokens) -> MetaPath:
        """``MetaPath.of("User", "Post", "Tweet", "Contain", "Hashtag")``."""
        if len(tokens) < 3 or len(tokens) % 2 == 0:
            raise GraphError("expected alternating node/edge types")
        types = [_node_type(t) for t in tokens[0::2]]
        rels = [_edge_type(r) for r in tokens[1::2]]
        return cls(tuple((types[i], rels[i], types[i + 1]) for i in range(len(rels))))

    @property
    def node_types(self) -> list[NodeType]:
        return [self.steps[0][0]] + [s[2] for s in self.steps]

    def __str__(self) -> str:
        parts = [self.steps[0][0].name]
        for _, r, t in self.steps:
            parts += [f"-{r.name}->", t.name]
        return "".join(parts)


DEFAULT_METAPATHS = (
    MetaPath.of("User", "Follow", "User"),
    MetaPath.of("User", "Post", "Tweet", "Contain", "Hashtag"),
    MetaPath.of("User", "Post", "Tweet", "Contain", "Entity"),
    MetaPath.of("User", "Write", "Comment", "Reply", "Tweet"),
    MetaPath.of("User", "Retweet", "Tweet"),
)


def _path_edges(g: HetGraph, path: MetaPath) -> tuple[np.ndarray, np.ndarray]:
    """Edges and nodes lying on at least one (directed) instance of ``path``.

    Forward pass marks nodes reachable by a path prefix, backward pass keeps
    those that can also complete the suffix.
    """
    n = g.n_nodes
    L = len(path.steps)
    fwd = [g.node_type == path.steps[0][0]]
    step_edges = []
    for t_src, r, t_dst in path.steps:
        e = (g.rel == r) & (g.node_type[g.src] == t_src) & (g.node_type[g.dst] == t_dst)
        e &= fwd[-1][g.src]
        step_edges.append(e)
        reach = np.zeros(n, dtype=bool)
        reach[g.dst[e]] = True
        fwd.append(reach)
    bwd = [None] * (L + 1)
    bwd[L] = fwd[L]
    keep_edges = np.zeros(g.n_edges, dtype=bool)
    for i in range(L - 1, -1, -1):
        e = step_edges[i] & bwd[i + 1][g.dst]
        keep_edges |= e
        ok = np.zeros(n, dtype=bool)
        ok[g.src[e]] = True
        bwd[i] = ok & fwd[i]
    keep_nodes = np.zeros(n, dtype=bool)
    for b in bwd:
        keep_nodes |= b
    return keep_edges, keep_nodes


def filter_by_metapaths(g: HetGraph, paths: Sequence[MetaPath]) -> HetGraph:
    """Keep only nodes/edges on some meta-path instance (labeled users always
    survive). Nodes are renumbered compactly; ``node_ids`` tracks originals."""
    if not paths:
        raise GraphError("need at least one meta-path")
    keep_e = np.zeros(g.n_edges, dtype=bool)
    keep_n = g.labels >= 0
    for p in paths:
        e, v = _path_edges(g, p)
        keep_e |= e
        keep_n |= v
    remap = np.full(g.n_nodes, -1, dtype=np.int64)
    kept = np.flatnonzero(keep_n)
    remap[kept] = np.arange(len(kept))
    out = HetGraph(
        g.node_type[kept], remap[g.src[keep_e]], remap[g.dst[keep_e]], g.rel[keep_e],
        g.features[kept], g.labels[kept], g.node_ids[kept],
    )
    out.train, out.val, out.test = (remap[m] for m in (g.train, g.val, g.test))
    return out


# ---------------------------------------------------------------------------
# subgraphs


@dataclass
class Subgraph:
    center: int
    k: int
    nodes: np.ndarray        # global ids, center first then ascending
    edges: np.ndarray        # (m, 3): local src, local dst, EdgeType
    features: np.ndarray     # rows aligned with ``nodes``

    @property
    def size(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> np.ndarray:
        """Binary symmetric adjacency (relation types collapsed)."""
        A = np.zeros((self.size, self.size))
        if len(self.edges):
            A[self.edges[:, 0], self.edges[:, 1]] = 1.0
            A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A


def khop_nodes(g: HetGraph, center: int, k: int) -> np.ndarray:
    seen = np.zeros(g.n_nodes, dtype=bool)
    seen[center] = True
    frontier = [center]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in g.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    nxt.append(int(v))
        if not nxt:
            break
        frontier = nxt
    return np.flatnonzero(seen)


def extract_subgraph(g: HetGraph, center: int, k: int) -> Subgraph:
    if not 0 <= center < g.n_nodes:
        raise GraphError(f"unknown center {center}")
    if g.node_type[center] != NodeType.User:
        raise GraphError(f"center {center} is not a User node")
    if k < 0:
        raise GraphError("hop count must be >= 0")
    members = khop_nodes(g, center, k)
    nodes = np.concatenate([[center], members[members != center]]).astype(np.int64)
    local = {int(u): i for i, u in enumerate(nodes)}
    eids = set()
    for u in nodes:
        for e, v in zip(g.incident_edges(u), g.neighbors(u)):
            if int(v) in local:
                eids.add(int(e))
    eids = np.array(sorted(eids), dtype=np.int64)
    if len(eids):
        edges = np.stack([
            np.array([local[int(u)] for u in g.src[eids]]),
            np.array([local[int(v)] for v in g.dst[eids]]),
            g.rel[eids].astype(np.int64),
        ], axis=1)
    else:
        edges = np.zeros((0, 3), dtype=np.int64)
    return Subgraph(int(center), int(k), nodes, edges, g.features[nodes])


def walk_counts(sub: Subgraph, max_len: int) -> np.ndarray:
    """Number of walks of length 1..max_len from the center to each local node,
    capped at ``WALK_CAP`` per node."""
    A = sp.csr_matrix(sub.adjacency())
    vec = np.zeros(sub.size)
    vec[0] = 1.0
    total = np.zeros(sub.size)
    for _ in range(max_len):
        vec = np.minimum(A.T @ vec, WALK_CAP)
        total = np.minimum(total + vec, WALK_CAP)
    return total


def transition_distribution(g: HetGraph, sub: Subgraph, targets: Sequence[int]) -> np.ndarray:
    """Probability of jumping from ``sub.center`` to each entry of ``targets``.

    Weights are walk counts of length <= 2k inside the subgraph; the center
    itself gets no mass. With nothing reachable the jump is uniform over the
    other targets.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise GraphError("empty target set")
    counts = walk_counts(sub, 2 * sub.k)
    local = {int(u): i for i, u in enumerate(sub.nodes)}
    w = np.array([0.0 if t == sub.center or int(t) not in local else counts[local[int(t)]]
                  for t in targets])
    if w.sum() > 0:
        return w / w.sum()
    others = targets != sub.center
    if not others.any():
        return np.full(len(targets), 1.0 / len(targets))
    return others / others.sum()


# ---------------------------------------------------------------------------
# JSON Lines graph files


def write_jsonl(g: HetGraph, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_jsonl(g))


def dumps_jsonl(g: HetGraph) -> str:
    lines = []
    for u in range(g.n_nodes):
        rec = {"t": "node", "id": int(g.node_ids[u]), "type": NodeType(g.node_type[u]).name,
               "x": [float(v) for v in g.features[u]]}
        if g.labels[u] >= 0:
            rec["y"] = int(g.labels[u])
        lines.append(json.dumps(rec))
    for s, d, r in zip(g.src.tolist(), g.dst.tolist(), g.rel.tolist()):
        lines.append(json.dumps({"t": "edge", "src": int(g.node_ids[s]), "dst": int(g.node_ids[d]),
                                 "rel": EdgeType(r).name}))
    return "".join(line + "\n" for line in lines)


def read_jsonl(path: str | Path) -> HetGraph:
    types, feats, labels, edges = [], [], {}, []
    index: dict[int, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from None
            kind = rec.get("t")
            if kind == "node":
                nid = int(rec["id"])
                if nid in index:
                    raise GraphError(f"{path}:{lineno}: duplicate node {nid}")
                index[nid] = len(types)
                types.append(rec["type"])
                feats.append(rec["x"])
                if "y" in rec:
                    labels[index[nid]] = int(rec["y"])
            elif kind == "edge":
                try:
                    edges.append((index[int(rec["src"])], index[int(rec["dst"])], rec["rel"]))
                except KeyError:
                    raise GraphError(f"{path}:{lineno}: edge before its endpoint node") from None
            else:
                raise GraphError(f"{path}:{lineno}: unknown record kind {kind!r}")
    g = build_graph(types, edges, feats, labels)
    g.node_ids = np.array(sorted(index, key=index.get), dtype=np.int64)
    return g
