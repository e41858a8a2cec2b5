import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rosgas.hetgraph import (DEFAULT_METAPATHS, WALK_CAP, EdgeType, GraphError, MetaPath, NodeType,
                             build_graph, dumps_jsonl, extract_subgraph, filter_by_metapaths,
                             read_jsonl, transition_distribution, walk_counts, write_jsonl)

from graphs import random_graph
from oracles import bfs_oracle, walk_oracle


# ---------------------------------------------------------------------------
# independent oracles


def metapath_oracle(g, paths):
    """DFS over every directed instance of every path; returns kept edge ids
    and kept node ids (original numbering)."""
    out_edges = {}
    for e, (u, r) in enumerate(zip(g.src.tolist(), g.rel.tolist())):
        out_edges.setdefault(u, []).append(e)
    kept_e, kept_n = set(), set(np.flatnonzero(g.labels >= 0).tolist())

    def dfs(u, path, i, used):
        if i == len(path.steps):
            kept_e.update(used)
            kept_n.update(g.src[list(used)].tolist() + g.dst[list(used)].tolist())
            return
        ts, r, td = path.steps[i]
        for e in out_edges.get(u, []):
            v = int(g.dst[e])
            if g.rel[e] == r and g.node_type[v] == td:
                dfs(v, path, i + 1, used + [e])

    for p in paths:
        for u in range(g.n_nodes):
            if g.node_type[u] == p.steps[0][0]:
                dfs(u, p, 0, [])
    return kept_e, kept_n


def edge_multiset(g, edge_ids=None):
    ids = range(g.n_edges) if edge_ids is None else edge_ids
    return sorted((int(g.node_ids[g.src[e]]), int(g.node_ids[g.dst[e]]), int(g.rel[e])) for e in ids)


# ---------------------------------------------------------------------------
# construction


def test_empty_graph():
    g = build_graph([], [], [])
    assert g.n_nodes == 0 and len(g.targets) == 0


def test_minimal_graph():
    g = build_graph(["User", "User"], [(0, 1, "Follow")], [[0.0], [1.0]], {0: 1})
    assert g.n_nodes == 2
    assert g.targets.tolist() == [0]


def test_build_rejects_bad_input():
    with pytest.raises(GraphError):
        build_graph(["User"], [(0, 3, "Follow")], [[0.0]])
    with pytest.raises(GraphError):
        build_graph(["User", "Tweet"], [], [[0.0], [1.0]], {1: 0})
    with pytest.raises(GraphError):
        build_graph(["User", "User"], [], [[0.0], [1.0, 2.0]])
    with pytest.raises(GraphError):
        build_graph(["User"], [], [[0.0]], {0: 2})


def test_random_graphs_satisfy_invariants():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = random_graph(rng, 100, 250, schema=False)
        g.check()
        assert set(g.targets.tolist()) == set(np.flatnonzero(g.labels >= 0).tolist())


def test_check_catches_overlapping_masks():
    g = build_graph(["User", "User"], [], [[0.0], [1.0]], {0: 1, 1: 0})
    with pytest.raises(GraphError):
        g.with_masks([0], [0], [1])


# ---------------------------------------------------------------------------
# meta-path filtering


def test_follow_path_drops_post_edge():
    g = build_graph(["User", "User", "Tweet"], [(0, 1, "Follow"), (0, 2, "Post")],
                    np.zeros((3, 2)), {})
    f = filter_by_metapaths(g, [MetaPath.of("User", "Follow", "User")])
    assert f.node_ids.tolist() == [0, 1]
    assert edge_multiset(f) == [(0, 1, int(EdgeType.Follow))]


def test_filter_empty_graph():
    g = build_graph([], [], [])
    assert filter_by_metapaths(g, DEFAULT_METAPATHS).n_nodes == 0


def test_labeled_user_survives_without_paths():
    g = build_graph(["User", "Tweet"], [], np.zeros((2, 1)), {0: 1})
    f = filter_by_metapaths(g, DEFAULT_METAPATHS)
    assert f.node_ids.tolist() == [0] and f.targets.tolist() == [0]


def test_metapath_filter_matches_dfs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(150):
        g = random_graph(rng, int(rng.integers(2, 13)), int(rng.integers(0, 20)), label_share=0.3)
        f = filter_by_metapaths(g, DEFAULT_METAPATHS)
        kept_e, kept_n = metapath_oracle(g, DEFAULT_METAPATHS)
        assert edge_multiset(f) == edge_multiset(g, kept_e)
        assert sorted(f.node_ids.tolist()) == sorted(kept_n)


def test_metapath_direction_matters():
    # a tweet containing a hashtag whose author is unknown is not an instance
    g = build_graph(["User", "Tweet", "Hashtag"], [(1, 2, "Contain")], np.zeros((3, 1)), {})
    p = MetaPath.of("User", "Post", "Tweet", "Contain", "Hashtag")
    assert filter_by_metapaths(g, [p]).n_edges == 0


def test_metapath_rejects_bad_specs():
    with pytest.raises(GraphError):
        MetaPath.of("User", "Follow")
    with pytest.raises(GraphError):
        MetaPath(((NodeType.User, EdgeType.Post, NodeType.Tweet),
                  (NodeType.User, EdgeType.Follow, NodeType.User)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_filter_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 30)), int(rng.integers(0, 60)))
    once = filter_by_metapaths(g, DEFAULT_METAPATHS)
    twice = filter_by_metapaths(once, DEFAULT_METAPATHS)
    assert once.node_ids.tolist() == twice.node_ids.tolist()
    assert edge_multiset(once) == edge_multiset(twice)


# ---------------------------------------------------------------------------
# subgraphs


def _chain():
    return build_graph(["User", "User", "User"], [(0, 1, "Follow"), (1, 2, "Follow")],
                       np.eye(3), {0: 1})


def test_k0_is_center_only():
    s = extract_subgraph(_chain(), 1, 0)
    assert s.nodes.tolist() == [1] and len(s.edges) == 0


def test_chain_k1():
    s = extract_subgraph(_chain(), 0, 1)
    assert s.nodes.tolist() == [0, 1]
    assert s.edges.tolist() == [[0, 1, int(EdgeType.Follow)]]


def test_center_first_then_ascending():
    s = extract_subgraph(_chain(), 2, 2)
    assert s.nodes.tolist() == [2, 0, 1]
    np.testing.assert_array_equal(s.features, np.eye(3)[[2, 0, 1]])


def test_extract_errors():
    g = build_graph(["User", "Tweet"], [(0, 1, "Post")], np.zeros((2, 1)))
    for center, k in [(5, 1), (-1, 1), (1, 1), (0, -1)]:
        with pytest.raises(GraphError):
            extract_subgraph(g, center, k)


def test_subgraph_bfs_oracle_1000_graphs():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(1, 201))
        g = random_graph(rng, n, int(rng.integers(0, 2 * n + 1)), schema=False)
        users = np.flatnonzero(g.node_type == NodeType.User)
        center = int(rng.choice(users))
        k = int(rng.integers(0, 4))
        s = extract_subgraph(g, center, k)
        edges = list(zip(g.src.tolist(), g.dst.tolist(), g.rel.tolist()))
        assert set(s.nodes.tolist()) == bfs_oracle(n, edges, center, k)
    assert time.perf_counter() - t0 < 30


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_widening_is_monotone_and_induced_edges_complete(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    g = random_graph(rng, n, int(rng.integers(0, 200)), schema=False)
    center = int(rng.choice(np.flatnonzero(g.node_type == NodeType.User)))
    small, big = extract_subgraph(g, center, k), extract_subgraph(g, center, k + 1)
    assert set(small.nodes.tolist()) <= set(big.nodes.tolist())
    members = set(small.nodes.tolist())
    expected = sorted((int(u), int(v), int(r)) for u, v, r in zip(g.src, g.dst, g.rel)
                      if u in members and v in members)
    got = sorted((int(small.nodes[a]), int(small.nodes[b]), int(r)) for a, b, r in small.edges)
    assert got == expected


# ---------------------------------------------------------------------------
# transitions


def test_walk_counts_match_enumeration_on_small_graphs():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        g = random_graph(rng, n, int(rng.integers(0, 14)), user_share=0.6, label_share=0.7,
                         schema=False)
        users = np.flatnonzero(g.node_type == NodeType.User)
        center = int(rng.choice(users))
        s = extract_subgraph(g, center, int(rng.integers(1, 3)))
        counts = walk_oracle(s)
        np.testing.assert_array_equal(walk_counts(s, 2 * s.k), counts)
        targets = g.targets if len(g.targets) else np.array([center])
        w = np.array([0.0 if t == center or t not in s.nodes else counts[s.nodes.tolist().index(t)]
                      for t in targets])
        if w.sum() > 0:
            expected = w / w.sum()
        else:
            others = targets != center
            expected = others / others.sum() if others.any() else np.full(len(targets), 1 / len(targets))
        got = transition_distribution(g, s, targets)
        assert np.abs(got - expected).sum() <= 1e-9
        checked += 1
    assert checked == 200


def test_uniform_fallback():
    g = build_graph(["User"] * 4, [(0, 1, "Follow")], np.zeros((4, 1)), {0: 1, 2: 0, 3: 1})
    p = transition_distribution(g, extract_subgraph(g, 0, 1), g.targets)
    np.testing.assert_allclose(p, [0.0, 0.5, 0.5])


def test_single_reachable_target():
    g = build_graph(["User", "User", "User"], [(0, 1, "Follow"), (1, 2, "Follow"), (0, 2, "Follow")],
                    np.zeros((3, 1)), {0: 1, 2: 0})
    p = transition_distribution(g, extract_subgraph(g, 0, 1), g.targets)
    np.testing.assert_allclose(p, [0.0, 1.0])


def test_hand_enumerated_two_to_one():
    # c=0, a=1, b=2, x=3 with edges c-a, c-b, c-x, x-a and k=1
    g = build_graph(["User"] * 4, [(0, 1, "Follow"), (0, 2, "Follow"), (0, 3, "Follow"), (3, 1, "Follow")],
                    np.zeros((4, 1)), {0: 0, 1: 1, 2: 0})
    s = extract_subgraph(g, 0, 1)
    # walks of length 1..2 ending at a: c-a, c-x-a -> 2; at b: c-b -> 1
    p = transition_distribution(g, s, g.targets)
    np.testing.assert_allclose(p, [0.0, 2 / 3, 1 / 3], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transition_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 50)), int(rng.integers(0, 120)), user_share=0.5,
                     label_share=0.6, schema=False)
    if len(g.targets) < 2:
        return
    c = int(rng.choice(g.targets))
    s = extract_subgraph(g, c, int(rng.integers(1, 3)))
    p = transition_distribution(g, s, g.targets)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
    inside = np.isin(g.targets, s.nodes) & (g.targets != c)
    if inside.any() and p[inside].sum() > 0:
        assert np.all(p[~inside] == 0)


def test_walk_counts_are_capped():
    n = 30
    edges = [(i, j, "Follow") for i in range(n) for j in range(i + 1, n)]
    g = build_graph(["User"] * n, edges, np.zeros((n, 1)))
    s = extract_subgraph(g, 0, 4)
    assert walk_counts(s, 8).max() == WALK_CAP


# ---------------------------------------------------------------------------
# I/O


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    g = random_graph(rng, 40, 80)
    f = filter_by_metapaths(g, DEFAULT_METAPATHS)
    path = tmp_path / "g.jsonl"
    write_jsonl(f, path)
    h = read_jsonl(path)
    assert dumps_jsonl(h) == dumps_jsonl(f)
    np.testing.assert_array_equal(h.node_ids, f.node_ids)
    np.testing.assert_array_equal(h.features, f.features)


def test_jsonl_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"t": "edge", "src": 0, "dst": 1, "rel": "Follow"}\n')
    with pytest.raises(GraphError):
        read_jsonl(path)
    path.write_text("not json\n")
    with pytest.raises(GraphError):
        read_jsonl(path)
