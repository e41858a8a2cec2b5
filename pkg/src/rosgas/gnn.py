"""Shared GCN layer pool, readout, cross-subgraph attention, classifier and
the subgraph triplet pretext loss.

Subgraphs in a minibatch are packed into one block-diagonal sparse adjacency
so each layer is a single sparse product regardless of batch size.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .hetgraph import HetGraph, Subgraph, extract_subgraph
from .numcore import Param, Tensor

HIDDEN = 64
CLS_HIDDEN = 32
LEAKY_SLOPE = 0.2


class CheckpointError(ValueError):
    pass


class GnnStack:
    """``n_layers`` GCN weights shared across depth actions: depth ``l`` uses
    the first ``l`` of them."""

    def __init__(self, in_dim: int, n_layers: int = 3, heads: int = 2, seed: int = 0,
                 hidden: int = HIDDEN):
        if n_layers < 1 or heads < 1:
            raise ValueError("need at least one layer and one attention head")
        rng = np.random.default_rng(seed)
        self.in_dim, self.n_layers, self.heads, self.hidden = in_dim, n_layers, heads, hidden
        p: dict[str, Param] = {}
        for i in range(n_layers):
            rows = in_dim if i == 0 else hidden
            p[f"gcn.{i}.W"] = Param(nc.glorot(rng, rows, hidden), f"gcn.{i}.W")
        p["residual.P"] = Param(nc.glorot(rng, in_dim, hidden), "residual.P")
        for k in range(heads):
            p[f"att.{k}.W"] = Param(nc.glorot(rng, hidden, hidden), f"att.{k}.W")
            p[f"att.{k}.a"] = Param(nc.glorot(rng, 2 * hidden, 1), f"att.{k}.a")
        p["cls.W1"] = Param(nc.glorot(rng, hidden, CLS_HIDDEN), "cls.W1")
        p["cls.b1"] = Param(np.zeros((1, CLS_HIDDEN)), "cls.b1")
        p["cls.W2"] = Param(nc.glorot(rng, CLS_HIDDEN, 1), "cls.W2")
        p["cls.b2"] = Param(np.zeros((1, 1)), "cls.b2")
        self.params = p

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def layer(self, i: int) -> Param:
        return self.params[f"gcn.{i}.W"]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ (missing={sorted(missing)}, "
                                  f"unexpected={sorted(extra)})")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: checkpoint shape {v.shape} != {self.params[k].shape}")
        for k, v in state.items():
            self.params[k].value = np.array(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# adjacency and batching


def _norm_adj_sparse(sub: Subgraph) -> sp.csr_matrix:
    n = sub.size
    if len(sub.edges):
        r = np.concatenate([sub.edges[:, 0], sub.edges[:, 1]])
        c = np.concatenate([sub.edges[:, 1], sub.edges[:, 0]])
        A = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
        A.data[:] = 1.0      # collapse parallel edges and relation types
        A.setdiag(0)
        A.eliminate_zeros()
    else:
        A = sp.csr_matrix((n, n))
    A = A + sp.identity(n, format="csr")
    dinv = 1.0 / np.sqrt(np.asarray(A.sum(axis=1)).ravel())
    A = A.tocoo()
    return sp.csr_matrix((A.data * dinv[A.row] * dinv[A.col], (A.row, A.col)), shape=(n, n))


def normalize_adjacency(sub: Subgraph) -> np.ndarray:
    """Symmetrically normalized adjacency with self loops, as a dense array."""
    return _norm_adj_sparse(sub).toarray()


class Batch:
    """Several subgraphs packed for one forward pass."""

    def __init__(self, subs: Sequence[Subgraph], adj_cache: dict | None = None):
        self.subs = list(subs)
        rows, cols, vals = [], [], []
        offset = 0
        for s in self.subs:
            key = (s.center, s.k, s.size)
            coo = adj_cache.get(key) if adj_cache is not None else None
            if coo is None:
                a = _norm_adj_sparse(s).tocoo()
                coo = (a.row.astype(np.int64), a.col.astype(np.int64), a.data)
                if adj_cache is not None:
                    adj_cache[key] = coo
            rows.append(coo[0] + offset)
            cols.append(coo[1] + offset)
            vals.append(coo[2])
            offset += s.size
        self.adj = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(offset, offset))
        self.X = Tensor(np.vstack([s.features for s in self.subs]))
        sizes = np.array([s.size for s in self.subs])
        seg = np.repeat(np.arange(len(sizes)), sizes)
        self.pool = sp.csr_matrix((np.repeat(1.0 / sizes, sizes), (seg, np.arange(offset))),
                                  shape=(len(sizes), offset))


BATCH_CACHE_SIZE = 64


def get_batch(subs: Sequence[Subgraph], adj_cache: dict | None) -> Batch:
    """``Batch(subs)``, memoized in ``adj_cache`` (LRU, ``BATCH_CACHE_SIZE``
    entries) since reward probes and gradient checks repeat the same batch."""
    if adj_cache is None:
        return Batch(subs)
    lru = adj_cache.setdefault("_batches", OrderedDict())
    key = tuple((s.center, s.k, s.size) for s in subs)
    batch = lru.get(key)
    if batch is None:
        batch = lru[key] = Batch(subs, adj_cache)
        if len(lru) > BATCH_CACHE_SIZE:
            lru.popitem(last=False)
    else:
        lru.move_to_end(key)
    return batch


def forward_batch(stack: GnnStack, batch: Batch, l: int) -> Tensor:
    """Per-node embeddings for every packed node after ``l`` shared layers and
    the residual projection of the raw features."""
    if not 1 <= l <= stack.n_layers:
        raise ValueError(f"layer count {l} outside [1, {stack.n_layers}]")
    H = batch.X
    for i in range(l):
        H = nc.relu(nc.matmul(batch.adj, nc.matmul(H, stack.layer(i))))
    return nc.add(H, nc.matmul(batch.X, stack.params["residual.P"]))


def forward_stack(stack: GnnStack, sub: Subgraph, l: int) -> Tensor:
    return forward_batch(stack, Batch([sub]), l)


def readout(H: Tensor) -> Tensor:
    return nc.mean_rows(H)


def embed(stack: GnnStack, subs: Sequence[Subgraph], layers: Sequence[int],
          adj_cache: dict | None = None) -> Tensor:
    """Readout vectors (one row per subgraph), each at its own depth."""
    layers = list(layers)
    if len(layers) != len(subs):
        raise ValueError("one layer count per subgraph")
    parts, order = [], []
    for l in sorted(set(layers)):
        idx = [i for i, x in enumerate(layers) if x == l]
        batch = get_batch([subs[i] for i in idx], adj_cache)
        parts.append(nc.matmul(batch.pool, forward_batch(stack, batch, l)))
        order.extend(idx)
    Z = nc.row_concat(parts)
    if order == sorted(order):
        return Z
    return nc.take_rows(Z, np.argsort(order))


def center_relevance(subs: Sequence[Subgraph]) -> np.ndarray:
    """``rel[i, j]`` is True when the target user of subgraph j lies inside
    subgraph i (or i == j)."""
    B = len(subs)
    rel = np.eye(B, dtype=bool)
    centers = np.array([s.center for s in subs])
    for i, s in enumerate(subs):
        rel[i] |= np.isin(centers, s.nodes)
    return rel


def relevance(subs: Sequence[Subgraph], mode: str = "center") -> np.ndarray:
    if mode == "center":
        return center_relevance(subs)
    if mode == "overlap":
        return overlap_relevance(subs)
    raise ValueError(f"unknown attention relevance {mode!r}")


def overlap_relevance(subs: Sequence[Subgraph]) -> np.ndarray:
    """``rel[i, j]`` is True when subgraphs i and j share a node (or i == j)."""
    B = len(subs)
    cols = np.concatenate([s.nodes for s in subs])
    rows = np.repeat(np.arange(B), [s.size for s in subs])
    n = int(cols.max()) + 1
    S = sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(B, n))
    rel = (S @ S.T).toarray() > 0
    np.fill_diagonal(rel, True)
    return rel


def attention_aggregate(stack: GnnStack, z_pre: Tensor, relevance: np.ndarray,
                        return_alpha: bool = False):
    """Multi-head attention over relevant subgraphs in the batch; heads are averaged."""
    B = z_pre.shape[0]
    h = stack.hidden
    ones_row = Tensor(np.ones((1, B)))
    ones_col = Tensor(np.ones((B, 1)))
    outs, alphas = [], []
    for k in range(stack.heads):
        W = stack.params[f"att.{k}.W"]
        a = stack.params[f"att.{k}.a"]
        Y = nc.matmul(z_pre, W)
        s_self = nc.matmul(Y, nc.take_rows(a, np.arange(h)))
        s_other = nc.matmul(Y, nc.take_rows(a, np.arange(h, 2 * h)))
        E = nc.add(nc.matmul(s_self, ones_row), nc.matmul(ones_col, nc.transpose(s_other)))
        alpha = nc.softmax_rows(nc.leaky_relu(E, LEAKY_SLOPE), relevance)
        outs.append(nc.matmul(alpha, Y))
        alphas.append(alpha.value)
    z = nc.scale(nc.add_all(outs), 1.0 / stack.heads)
    return (z, alphas) if return_alpha else z


def classify(stack: GnnStack, z: Tensor) -> Tensor:
    p = stack.params
    hidden = nc.relu(nc.add(nc.matmul(z, p["cls.W1"]), p["cls.b1"]))
    return nc.add(nc.matmul(hidden, p["cls.W2"]), p["cls.b2"])


def predict(logits: Tensor) -> np.ndarray:
    return (nc._sigmoid(logits.value[:, 0]) > 0.5).astype(np.int8)


def subgraph_embeddings(stack: GnnStack, subs: Sequence[Subgraph], layers: Sequence[int],
                        adj_cache: dict | None = None, mode: str = "center") -> tuple[Tensor, Tensor]:
    """(z_pre, z) for a batch: readout vectors and their attention-aggregated form."""
    z_pre = embed(stack, subs, layers, adj_cache)
    return z_pre, attention_aggregate(stack, z_pre, relevance(subs, mode))


# ---------------------------------------------------------------------------
# self-supervision and losses


def ssl_sample(g: HetGraph, center: int, k: int, targets: Sequence[int], k_max: int,
               rng: np.random.Generator | int, extract=extract_subgraph) -> tuple[Subgraph, Subgraph]:
    """Positive: same center at another width. Negative: another target at width ``k``."""
    if k_max < 2:
        raise ValueError("self-supervision needs at least two widths (K_max >= 2)")
    targets = [int(t) for t in targets if int(t) != center]
    if not targets:
        raise ValueError("need another target user for the negative sample")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    widths = [w for w in range(1, k_max + 1) if w != k]
    k_bar = widths[int(rng.integers(len(widths)))]
    other = targets[int(rng.integers(len(targets)))]
    return extract(g, center, k_bar), extract(g, other, k)


def ssl_loss(z: Tensor, z_pos: Tensor, z_neg: Tensor, margin: float = 0.1,
             form: str = "as_printed") -> Tensor:
    """Per-row triplet term on sigmoid-squashed inner products."""
    pos = nc.sigmoid(nc.dot(z, z_pos))
    neg = nc.sigmoid(nc.dot(z, z_neg))
    eps = Tensor(np.full(pos.shape, margin))
    if form == "as_printed":
        return nc.scale(nc.relu(nc.add(nc.sub(pos, neg), eps)), -1.0)
    if form == "standard_hinge":
        return nc.relu(nc.add(nc.sub(neg, pos), eps))
    raise ValueError(f"unknown ssl_loss_form {form!r}")


def l2_norm(params: Sequence[Param]) -> Tensor:
    return nc.sqrt(nc.add_all([nc.sum_squares(p) for p in params]))


def total_loss(logits: Tensor, labels, ssl_terms: Tensor | None, lam: float,
               params: Sequence[Param]) -> Tensor:
    """Summed BCE plus summed pretext terms plus ``lam`` times the parameter L2 norm."""
    loss = nc.sum_all(nc.bce_with_logits(logits, labels))
    if ssl_terms is not None:
        loss = nc.add(loss, nc.sum_all(ssl_terms))
    if lam:
        loss = nc.add(loss, nc.scale(l2_norm(params), lam))
    return loss


# ---------------------------------------------------------------------------
# checkpoints


def save_arrays(arrays: dict[str, np.ndarray], path: str | Path, extra: dict | None = None) -> None:
    doc = {name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
           for name, a in arrays.items()}
    if extra:
        doc["__meta__"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    meta = doc.pop("__meta__", {})
    out = {}
    for name, rec in doc.items():
        try:
            shape = tuple(int(s) for s in rec["shape"])
            data = np.asarray(rec["data"], dtype=np.float64)
            out[name] = data.reshape(shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{name}: malformed array record ({exc})") from None
    return out, meta


def save_stack(stack: GnnStack, path: str | Path) -> None:
    save_arrays(stack.state_dict(), path, {"in_dim": stack.in_dim, "n_layers": stack.n_layers,
                                           "heads": stack.heads, "hidden": stack.hidden})


def load_stack(path: str | Path, expect_in_dim: int | None = None) -> GnnStack:
    arrays, meta = load_arrays(path)
    try:
        stack = GnnStack(int(meta["in_dim"]), int(meta["n_layers"]), int(meta["heads"]),
                         hidden=int(meta.get("hidden", HIDDEN)))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc}") from None
    if expect_in_dim is not None and stack.in_dim != expect_in_dim:
        raise CheckpointError(f"checkpoint expects feature dim {stack.in_dim}, graph has {expect_in_dim}")
    stack.load_state_dict(arrays)
    return stack
