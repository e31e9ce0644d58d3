"""Local and global counterfactual-evidence queries.

A counterfactual evidence for a test node ``v`` is another test node with a
different predicted label whose aggregated vector is as cosine-similar to
``v``'s as possible.  Hits are ordered by ``(ks desc, node asc)``; global
pairs by ``(ks desc, (min, max) asc)``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .ks_kernel import unit_rows
from .model_runner import PredictionTable
from .spherical_index import SphericalIndex, lookup

Mode = Literal["exact", "indexed"]
Strategy = Literal["per-node-top1", "full-pairwise"]

# query status values
OK = "ok"
NO_COUNTERFACTUAL = "no-counterfactual"  # no test node with another label exists anywhere
EMPTY_CLUSTER = "empty-cluster"  # the indexed cluster holds nothing but the query
NO_CROSS_LABEL_IN_CLUSTER = "no-cross-label-in-cluster"


@dataclass(frozen=True)
class Hit:
    node: int
    ks: float


@dataclass
class CeQueryResult:
    query: int
    hits: list[Hit]
    mode: str
    status: str = OK
    scanned: int = 0

    def to_json(self) -> dict:
        return {"query": self.query, "mode": self.mode,
                "hits": [{"node": h.node, "ks": round(h.ks, 6)} for h in self.hits]}


@dataclass(frozen=True, order=True)
class GcePair:
    u: int
    v: int
    ks: float = field(compare=False)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.u, self.v)

    def to_json(self) -> dict:
        return {"pair": [self.u, self.v], "ks": round(self.ks, 6)}


def make_pair(a: int, b: int, ks: float) -> GcePair:
    return GcePair(min(a, b), max(a, b), ks)


class SearchContext:
    """Precomputed state shared by all queries against one prediction table.

    Holds the unit-normalized aggregated vectors and the test nodes grouped by
    predicted class, so an exact query only scans the other classes.
    """

    def __init__(self, agg: np.ndarray, predictions: PredictionTable, test_nodes):
        self.test_nodes = np.asarray(test_nodes, dtype=np.int64)
        if self.test_nodes.size == 0:
            raise ValueError("no test nodes")
        predictions.require(self.test_nodes)
        self.agg = np.asarray(agg, dtype=np.float64)
        self.unit = unit_rows(self.agg)
        self.labels = predictions.predicted
        self.is_test = np.zeros(self.agg.shape[0], dtype=bool)
        self.is_test[self.test_nodes] = True
        by_label = self.labels[self.test_nodes]
        self.classes = {int(c): np.sort(self.test_nodes[by_label == c]) for c in np.unique(by_label)}
        self._others: dict[int, np.ndarray] = {}

    def check_query(self, v: int) -> int:
        if not 0 <= int(v) < self.agg.shape[0] or not self.is_test[int(v)]:
            raise KeyError(f"node {v} is not a test node")
        return int(v)

    def other_class_nodes(self, label: int) -> np.ndarray:
        if label not in self._others:
            parts = [nodes for c, nodes in self.classes.items() if c != label]
            self._others[label] = np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
        return self._others[label]

    def scores(self, v: int, candidates: np.ndarray) -> np.ndarray:
        return self.unit[candidates] @ self.unit[v]

    def pair_ks(self, a: int, b: int) -> float:
        # one fixed operand order so either endpoint reports the same value
        lo, hi = (a, b) if a < b else (b, a)
        return float(np.dot(self.unit[lo], self.unit[hi]))


# ---------------------------------------------------------------------------
# bucket


def topk_bucket_insert(bucket: list[Hit], candidate: Hit, k: int) -> list[Hit]:
    """Insert into a bucket kept in ``(ks desc, node asc)`` order, holding at most ``k``."""
    key = (-candidate.ks, candidate.node)
    if len(bucket) >= k:
        last = bucket[-1]
        if key >= (-last.ks, last.node):
            return bucket
    keys = [(-h.ks, h.node) for h in bucket]
    bucket.insert(bisect.bisect_left(keys, key), candidate)
    if len(bucket) > k:
        bucket.pop()
    return bucket


def _top_k(candidates: np.ndarray, scores: np.ndarray, k: int) -> list[Hit]:
    if candidates.size == 0:
        return []
    if candidates.size > 4 * k:
        # cut to everything tying or beating the k-th score, then order exactly
        kth = np.partition(scores, candidates.size - k)[candidates.size - k]
        keep = scores >= kth
        candidates, scores = candidates[keep], scores[keep]
    order = np.lexsort((candidates, -scores))[:k]
    return [Hit(int(candidates[i]), float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# local queries


def local_ce_exact(ctx: SearchContext, v: int, k: int) -> CeQueryResult:
    if k < 1:
        raise ValueError("k must be at least 1")
    v = ctx.check_query(v)
    cands = ctx.other_class_nodes(int(ctx.labels[v]))
    hits = _top_k(cands, ctx.scores(v, cands), k)
    status = OK if cands.size else NO_COUNTERFACTUAL
    return CeQueryResult(query=v, hits=hits, mode="exact", status=status, scanned=int(cands.size))


def local_ce_indexed(ctx: SearchContext, index: SphericalIndex, v: int, k: int) -> CeQueryResult:
    """Scan only the node's entry cluster; the result may miss better hits elsewhere."""
    if k < 1:
        raise ValueError("k must be at least 1")
    v = ctx.check_query(v)
    pool = lookup(index, v)
    label = int(ctx.labels[v])
    cands = pool[ctx.labels[pool] != label]
    hits = _top_k(cands, ctx.scores(v, cands), k)
    if hits:
        status = OK
    elif ctx.other_class_nodes(label).size == 0:
        status = NO_COUNTERFACTUAL
    elif pool.size == 0:
        status = EMPTY_CLUSTER
    else:
        status = NO_CROSS_LABEL_IN_CLUSTER
    return CeQueryResult(query=v, hits=hits, mode="indexed", status=status, scanned=int(pool.size))


def local_ce(ctx: SearchContext, v: int, k: int, mode: Mode = "exact",
             index: SphericalIndex | None = None) -> CeQueryResult:
    if mode == "exact":
        return local_ce_exact(ctx, v, k)
    if mode == "indexed":
        if index is None:
            raise ValueError("indexed mode needs an index")
        return local_ce_indexed(ctx, index, v, k)
    raise ValueError(f"unknown mode {mode!r}")


def all_local(ctx: SearchContext, k: int, mode: Mode = "exact",
              index: SphericalIndex | None = None) -> list[CeQueryResult]:
    return [local_ce(ctx, int(v), k, mode, index) for v in ctx.test_nodes]


# ---------------------------------------------------------------------------
# global queries


def _pair_key(p: GcePair):
    return (-p.ks, p.u, p.v)


def global_ce(ctx: SearchContext, k: int, mode: Mode = "exact", strategy: Strategy = "per-node-top1",
              index: SphericalIndex | None = None) -> list[GcePair]:
    """Top-``k`` cross-label pairs.

    ``per-node-top1`` takes each test node's best local hit, deduplicates the
    unordered pairs and keeps the best ``k``.  A node whose second-best hit
    beats some other node's best is never reported, so this can differ from
    ``full-pairwise``, which ranks every cross-label pair exactly.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if strategy == "full-pairwise":
        if mode != "exact":
            raise ValueError("full-pairwise is an exact strategy")
        return _global_full_pairwise(ctx, k)
    if strategy != "per-node-top1":
        raise ValueError(f"unknown strategy {strategy!r}")
    best: dict[tuple[int, int], GcePair] = {}
    for v in ctx.test_nodes:
        res = local_ce(ctx, int(v), 1, mode, index)
        if res.hits:
            p = make_pair(int(v), res.hits[0].node, 0.0)
            best.setdefault(p.pair, make_pair(p.u, p.v, ctx.pair_ks(p.u, p.v)))
    return sorted(best.values(), key=_pair_key)[:k]


def _global_full_pairwise(ctx: SearchContext, k: int, block: int = 1024) -> list[GcePair]:
    nodes = np.sort(ctx.test_nodes)
    labels = ctx.labels[nodes]
    U = ctx.unit[nodes]
    pool: list[GcePair] = []
    for lo in range(0, nodes.size, block):
        S = U[lo:lo + block] @ U.T
        rows = np.arange(lo, min(lo + block, nodes.size))
        valid = (labels[rows][:, None] != labels[None, :]) & (rows[:, None] < np.arange(nodes.size)[None, :])
        r, c = np.nonzero(valid)
        if r.size == 0:
            continue
        s = S[r, c]
        if s.size > k:
            kth = np.partition(s, s.size - k)[s.size - k]
            keep = s >= kth
            r, c, s = r[keep], c[keep], s[keep]
        for i, j in zip(r, c):
            a, b = int(nodes[rows[i]]), int(nodes[j])
            pool.append(GcePair(a, b, ctx.pair_ks(a, b)))
        pool.sort(key=_pair_key)
        del pool[k:]
    return pool
