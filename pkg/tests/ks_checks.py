"""Randomized checks of the KS kernel's invariants, shared by unit and acceptance tests."""

import math

import numpy as np

from ce_forge.graph_store import extract_l_hop, from_edges
from ce_forge.ks_kernel import KsParams, aggregated_vectors, cosine, ks_score

from conftest import random_graph


def reference_propagate(X, graph, alpha, hops):
    """Plain-loop propagation: per node, per neighbor, scalar math only."""
    n, d = X.shape
    cur = [list(map(float, row)) for row in X]
    out = [np.array(cur)]
    for _ in range(hops):
        nxt = []
        for v in range(n):
            nb = graph.indices[graph.indptr[v]:graph.indptr[v + 1]]
            acc = [0.0] * d
            for u in nb:
                a, b = cur[v], cur[int(u)]
                na = math.sqrt(sum(x * x for x in a))
                nb_ = math.sqrt(sum(x * x for x in b))
                c = 0.0 if na == 0 or nb_ == 0 else sum(x * y for x, y in zip(a, b)) / (na * nb_)
                c = max(-1.0, min(1.0, c))
                for j in range(d):
                    acc[j] += c * b[j]
            scale = (1 - alpha) / len(nb) if len(nb) else 0.0
            nxt.append([alpha * cur[v][j] + scale * acc[j] for j in range(d)])
        cur = nxt
        out.append(np.array(cur))
    return out


def _case(rng):
    n = int(rng.integers(3, 25))
    g = random_graph(rng, n, mean_degree=float(rng.uniform(0.5, 4.0)))
    d = int(rng.integers(1, 6))
    nonneg = bool(rng.integers(0, 2))
    X = rng.random((n, d)) if nonneg else rng.standard_normal((n, d))
    params = KsParams(alpha=float(rng.uniform(0, 1)), hops=int(rng.integers(0, 4)))
    return g, X, params, nonneg


def check_symmetry_range_self(rng) -> list[str]:
    g, X, params, nonneg = _case(rng)
    agg = aggregated_vectors(X, g, params)
    errors = []
    lo = 0.0 if nonneg else -1.0
    for v in range(g.num_nodes):
        if np.linalg.norm(agg[v]) > 0 and abs(ks_score(agg, v, v) - 1.0) > 1e-12:
            errors.append(f"self-similarity of {v} is {ks_score(agg, v, v)}")
        for u in range(v + 1, g.num_nodes):
            a, b = ks_score(agg, v, u), ks_score(agg, u, v)
            if abs(a - b) > 1e-12:
                errors.append(f"asymmetric ({v},{u}): {a} vs {b}")
            if not lo <= a <= 1.0:
                errors.append(f"ks({v},{u})={a} outside [{lo}, 1]")
    return errors


def check_permutation(rng) -> list[str]:
    g, X, params, _ = _case(rng)
    n = g.num_nodes
    perm = rng.permutation(n)
    g2 = from_edges(n, perm[g.edge_array()])
    X2 = np.empty_like(X)
    X2[perm] = X
    a1 = aggregated_vectors(X, g, params)
    a2 = aggregated_vectors(X2, g2, params)
    errors = []
    for v in range(n):
        for u in range(v + 1, n):
            if abs(ks_score(a1, v, u) - ks_score(a2, perm[v], perm[u])) > 1e-12:
                errors.append(f"permutation changed ks({v},{u})")
    return errors


def check_alpha_one(rng) -> list[str]:
    g, X, params, _ = _case(rng)
    agg = aggregated_vectors(X, g, KsParams(alpha=1.0, hops=params.hops))
    errors = []
    for v in range(g.num_nodes):
        for u in range(v + 1, g.num_nodes):
            if abs(ks_score(agg, v, u) - cosine(X[v], X[u])) > 1e-12:
                errors.append(f"alpha=1 ks({v},{u}) != raw cosine")
    return errors


def check_isomorphic_neighborhood(rng) -> list[str]:
    """Two copies of one graph; the second grows extra nodes hanging off nodes at
    distance >= L from the anchor, which leaves the anchor's L-hop subgraph
    unchanged.  The anchors must then score exactly alike."""
    g, X, params, _ = _case(rng)
    n = g.num_nodes
    L = params.hops
    anchor = int(rng.integers(0, n))
    ball = extract_l_hop(g, anchor, max(L - 1, 0)).nodes if L > 0 else frozenset()
    far = [v for v in range(n) if v not in ball and v != anchor] if L > 0 else []
    edges = [tuple(e) for e in g.edge_array()] + [(u + n, v + n) for u, v in g.edge_array()]
    extra = []
    for v in far:
        if rng.random() < 0.5:
            extra.append(v + n)
    new_x = [X]
    new_x.append(X)
    nid = 2 * n
    for v in extra:
        edges.append((v, nid))
        nid += 1
    if extra:
        new_x.append(rng.standard_normal((len(extra), X.shape[1])))
    big = from_edges(nid, edges)
    agg = aggregated_vectors(np.concatenate(new_x), big, params)
    if np.linalg.norm(agg[anchor]) == 0:
        return []
    ks = ks_score(agg, anchor, anchor + n)
    return [] if abs(ks - 1.0) <= 1e-12 else [f"isomorphic anchors scored {ks}"]


ALL_CHECKS = {
    "symmetry/range/self": check_symmetry_range_self,
    "permutation": check_permutation,
    "alpha=1": check_alpha_one,
    "isomorphic": check_isomorphic_neighborhood,
}
