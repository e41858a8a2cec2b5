"""Independent reference implementations shared by the unit and acceptance tests."""
from collections import deque

import numpy as np

from rosgas.rl import cosine_distance


def bfs_oracle(n, edges, center, k):
    adj = {u: set() for u in range(n)}
    for u, v, _ in edges:
        adj[u].add(v)
        adj[v].add(u)
    dist = {center: 0}
    q = deque([center])
    while q:
        u = q.popleft()
        if dist[u] == k:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return set(dist)


def walk_oracle(sub):
    """Enumerate every walk of length 1..2k from the center and count endpoints."""
    nbrs = {i: set() for i in range(sub.size)}
    for u, v, _ in sub.edges.tolist():
        nbrs[u].add(v)
        nbrs[v].add(u)
    counts = np.zeros(sub.size)
    frontier = [0]
    for _ in range(2 * sub.k):
        frontier = [v for u in frontier for v in sorted(nbrs[u])]
        for v in frontier:
            counts[v] += 1
    return counts


def brute_nn(records, s, a, l_corr):
    best = None
    for si, ai, qi in records:
        if ai != a:
            continue
        v = qi + l_corr * cosine_distance(s, si)
        best = v if best is None or v < best else best
    return best
