"""Small hand-built graphs used by the gnn, trainer and acceptance tests."""
import numpy as np

from rosgas import gnn
from rosgas.hetgraph import build_graph, extract_subgraph


def six_node_graph(d=8, seed=0):
    rng = np.random.default_rng(seed)
    types = ["User", "User", "User", "User", "Tweet", "Hashtag"]
    edges = [(0, 1, "Follow"), (1, 2, "Follow"), (2, 3, "Follow"), (0, 4, "Post"),
             (3, 4, "Retweet"), (4, 5, "Contain")]
    return build_graph(types, edges, rng.standard_normal((6, d)), {0: 1, 2: 0, 3: 1})


def composite_loss_fn(g, stack, margin=0.1, lam=0.01, form="as_printed", mode="center", seed=0):
    """Closure building the full training loss (BCE + pretext + L2) on a fixed
    three-item batch with mixed widths and depths."""
    items = [(0, 1, 2), (2, 2, 3), (3, 1, 1)]
    subs = [extract_subgraph(g, t, k) for t, k, _ in items]
    layers = [l for _, _, l in items]
    rng = np.random.default_rng(seed)
    pairs = [gnn.ssl_sample(g, t, k, g.targets, 2, rng) for t, k, _ in items]
    labels = g.labels[[t for t, _, _ in items]]
    cache = {}

    def build():
        _, z = gnn.subgraph_embeddings(stack, subs, layers, cache, mode)
        _, zp = gnn.subgraph_embeddings(stack, [p for p, _ in pairs], layers, cache, mode)
        _, zn = gnn.subgraph_embeddings(stack, [n for _, n in pairs], layers, cache, mode)
        ssl = gnn.ssl_loss(z, zp, zn, margin, form)
        return gnn.total_loss(gnn.classify(stack, z), labels, ssl, lam, stack.parameters())

    return build
