import math

import numpy as np
import pytest

from ce_forge.ce_search import (
    EMPTY_CLUSTER,
    NO_COUNTERFACTUAL,
    NO_CROSS_LABEL_IN_CLUSTER,
    OK,
    GcePair,
    Hit,
    SearchContext,
    all_local,
    global_ce,
    local_ce,
    local_ce_exact,
    local_ce_indexed,
    make_pair,
    topk_bucket_insert,
)
from ce_forge.ks_kernel import ks_score
from ce_forge.model_runner import PredictionTable
from ce_forge.spherical_index import IndexParams, build_index, lookup

from conftest import planted_bundles


def brute_force_local(agg, labels, test_nodes, v, k):
    """Double loop over every test node: no class partition, no bucket, no pruning."""
    scored = []
    for u in test_nodes:
        u = int(u)
        if u != v and labels[u] != labels[v]:
            scored.append((-ks_score(agg, v, u), u))
    scored.sort()
    return [(u, -s) for s, u in scored[:k]]


def brute_force_global(agg, labels, test_nodes, k):
    pairs = []
    nodes = sorted(int(x) for x in test_nodes)
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            if labels[a] != labels[b]:
                pairs.append((-ks_score(agg, a, b), a, b))
    pairs.sort()
    return [(a, b) for _, a, b in pairs[:k]]


def random_instance(seed, n=None, d=None, classes=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(5, 120))
    d = d or int(rng.integers(2, 10))
    classes = classes or int(rng.integers(2, 5))
    agg = rng.standard_normal((n, d))
    labels = rng.integers(0, classes, n)
    test = np.sort(rng.choice(n, size=max(2, int(0.7 * n)), replace=False))
    return agg, PredictionTable(labels, classes), test


def angles(*deg):
    return np.array([[math.cos(math.radians(a)), math.sin(math.radians(a))] for a in deg])


class TestBucket:
    def test_non_full_always_kept(self):
        b = topk_bucket_insert([Hit(1, 0.9)], Hit(2, 0.1), 3)
        assert b == [Hit(1, 0.9), Hit(2, 0.1)]

    def test_below_minimum_unchanged(self):
        b = [Hit(1, 0.9), Hit(2, 0.5)]
        assert topk_bucket_insert(list(b), Hit(3, 0.4), 2) == b

    def test_equal_ks_orders_by_node(self):
        b = topk_bucket_insert([Hit(5, 0.5)], Hit(3, 0.5), 2)
        assert [h.node for h in b] == [3, 5]

    def test_equal_ks_larger_id_rejected_when_full(self):
        b = [Hit(1, 0.9), Hit(4, 0.5)]
        assert topk_bucket_insert(list(b), Hit(7, 0.5), 2) == b

    def test_evicts_last(self):
        b = topk_bucket_insert([Hit(1, 0.9), Hit(2, 0.5)], Hit(3, 0.7), 2)
        assert b == [Hit(1, 0.9), Hit(3, 0.7)]

    def test_matches_sorted_stream(self):
        rng = np.random.default_rng(0)
        hits = [Hit(i, float(s)) for i, s in enumerate(rng.integers(0, 5, 60) / 4)]
        bucket = []
        for h in hits:
            topk_bucket_insert(bucket, h, 7)
        assert bucket == sorted(hits, key=lambda h: (-h.ks, h.node))[:7]


class TestLocalExact:
    def test_three_nodes(self):
        agg = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        ctx = SearchContext(agg, PredictionTable(np.array([0, 0, 1]), 2), [0, 1, 2])
        res = local_ce_exact(ctx, 0, 1)
        assert [h.node for h in res.hits] == [2] and res.status == OK

    def test_single_class_empty(self):
        ctx = SearchContext(np.eye(3), PredictionTable(np.zeros(3, int), 2), [0, 1, 2])
        res = local_ce_exact(ctx, 1, 5)
        assert res.hits == [] and res.status == NO_COUNTERFACTUAL

    def test_short_list(self):
        ctx = SearchContext(np.eye(3), PredictionTable(np.array([0, 1, 0]), 2), [0, 1, 2])
        assert [h.node for h in local_ce_exact(ctx, 1, 5).hits] == [0, 2]

    def test_non_test_node(self):
        ctx = SearchContext(np.eye(3), PredictionTable(np.array([0, 1, 0]), 2), [0, 1])
        with pytest.raises(KeyError):
            local_ce_exact(ctx, 2, 1)
        with pytest.raises(KeyError):
            local_ce_exact(ctx, 9, 1)

    def test_bad_k(self):
        ctx = SearchContext(np.eye(2), PredictionTable(np.array([0, 1]), 2), [0, 1])
        with pytest.raises(ValueError):
            local_ce_exact(ctx, 0, 0)

    def test_five_node_oracle(self):
        agg, preds, test = random_instance(5, n=5, d=3, classes=2)
        test = np.arange(5)
        ctx = SearchContext(agg, preds, test)
        for v in test:
            got = [(h.node, h.ks) for h in local_ce_exact(ctx, int(v), 4).hits]
            want = brute_force_local(agg, preds.predicted, test, int(v), 4)
            assert [u for u, _ in got] == [u for u, _ in want]
            np.testing.assert_allclose([s for _, s in got], [s for _, s in want], atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_oracle(self, seed):
        agg, preds, test = random_instance(seed)
        ctx = SearchContext(agg, preds, test)
        for k in (1, 5, 10):
            for v in test[:25]:
                got = local_ce_exact(ctx, int(v), k).hits
                want = brute_force_local(agg, preds.predicted, test, int(v), k)
                assert [h.node for h in got] == [u for u, _ in want]
                np.testing.assert_allclose([h.ks for h in got], [s for _, s in want], atol=1e-12)

    def test_ties_by_node_id(self):
        agg = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
        ctx = SearchContext(agg, PredictionTable(np.array([0, 1, 1, 1]), 2), range(4))
        res = local_ce_exact(ctx, 0, 2)
        assert [h.node for h in res.hits] == [1, 2]

    def test_monotone_k_prefix_and_validity(self):
        agg, preds, test = random_instance(42, n=200, classes=3)
        ctx = SearchContext(agg, preds, test)
        test_set = set(test.tolist())
        for v in test[:30]:
            prev = []
            for k in range(1, 12):
                hits = local_ce_exact(ctx, int(v), k).hits
                assert hits[:len(prev)] == prev
                prev = hits
                for h in hits:
                    assert h.node in test_set and preds.predicted[h.node] != preds.predicted[v]

    def test_json_six_decimals(self):
        res = local_ce_exact(SearchContext(angles(0, 30), PredictionTable(np.array([0, 1]), 2), [0, 1]), 0, 1)
        assert res.to_json() == {"query": 0, "mode": "exact", "hits": [{"node": 1, "ks": 0.866025}]}


@pytest.fixture(scope="module")
def bundle_ctx():
    X, preds = planted_bundles(3, n=800)
    nodes = np.arange(800)
    idx = build_index(X, nodes, IndexParams(partitions=5, clusters=10, seed=1))
    return SearchContext(X, preds, nodes), idx


class TestLocalIndexed:
    def test_degenerate_index_equals_exact(self):
        agg, preds, test = random_instance(7, n=100)
        ctx = SearchContext(agg, preds, test)
        idx = build_index(agg, test, IndexParams(partitions=1, clusters=1))
        for v in test:
            a = local_ce_indexed(ctx, idx, int(v), 5)
            b = local_ce_exact(ctx, int(v), 5)
            assert a.hits == b.hits

    def test_subset_and_rankwise_bound(self, bundle_ctx):
        ctx, idx = bundle_ctx
        for v in ctx.test_nodes[:200]:
            ind = local_ce(ctx, int(v), 10, "indexed", idx)
            ex = local_ce(ctx, int(v), 10, "exact")
            pool = set(lookup(idx, int(v)).tolist())
            assert {h.node for h in ind.hits} <= pool
            assert len(ind.hits) <= len(ex.hits)
            for a, b in zip(ind.hits, ex.hits):
                assert a.ks <= b.ks + 1e-15
            for h in ind.hits:
                assert ctx.labels[h.node] != ctx.labels[v]
            assert ind.scanned == len(pool)

    def test_statuses(self):
        pts = np.array([[1.0, 0.0], [0.99, 0.05], [1.0, 0.02], [-1.0, 0.0], [-0.98, 0.1]])
        labels = PredictionTable(np.array([0, 0, 0, 0, 1]), 2)
        idx = build_index(pts, np.arange(5), IndexParams(partitions=1, clusters=3, seed=0))
        ctx = SearchContext(pts, labels, range(5))
        statuses = {int(v): local_ce_indexed(ctx, idx, v, 3).status for v in range(5)}
        sizes = {int(v): lookup(idx, v).size for v in range(5)}
        for v, s in statuses.items():
            if sizes[v] == 0:
                assert s == EMPTY_CLUSTER
        assert NO_CROSS_LABEL_IN_CLUSTER in statuses.values() or EMPTY_CLUSTER in statuses.values()
        one = SearchContext(pts, PredictionTable(np.zeros(5, int), 2), range(5))
        assert local_ce_indexed(one, idx, 0, 3).status == NO_COUNTERFACTUAL

    def test_no_cross_label_in_cluster(self):
        pts = np.array([[1.0, 0.0], [0.99, 0.05], [-1.0, 0.0], [-0.99, 0.05]])
        idx = build_index(pts, np.arange(4), IndexParams(partitions=1, clusters=2, seed=0))
        ctx = SearchContext(pts, PredictionTable(np.array([0, 0, 1, 1]), 2), range(4))
        res = local_ce_indexed(ctx, idx, 0, 2)
        assert res.hits == [] and res.status == NO_CROSS_LABEL_IN_CLUSTER and res.scanned == 1

    def test_needs_index(self):
        ctx = SearchContext(np.eye(2), PredictionTable(np.array([0, 1]), 2), [0, 1])
        with pytest.raises(ValueError):
            local_ce(ctx, 0, 1, "indexed")
        with pytest.raises(ValueError):
            local_ce(ctx, 0, 1, "fuzzy")

    def test_all_local(self, bundle_ctx):
        ctx, idx = bundle_ctx
        res = all_local(ctx, 3, "indexed", idx)
        assert [r.query for r in res] == ctx.test_nodes.tolist()


class TestGlobal:
    def test_two_nodes(self):
        ctx = SearchContext(angles(0, 30), PredictionTable(np.array([0, 1]), 2), [0, 1])
        for strategy in ("per-node-top1", "full-pairwise"):
            pairs = global_ce(ctx, 3, strategy=strategy)
            assert [p.pair for p in pairs] == [(0, 1)]
            assert pairs[0].ks == pytest.approx(math.cos(math.radians(30)), abs=1e-15)

    def test_all_same_label(self):
        ctx = SearchContext(np.eye(3), PredictionTable(np.zeros(3, int), 2), range(3))
        for strategy in ("per-node-top1", "full-pairwise"):
            assert global_ce(ctx, 3, strategy=strategy) == []

    def test_pair_ordering(self):
        assert make_pair(5, 2, 0.3) == GcePair(2, 5, 0.3)
        assert sorted([GcePair(3, 4, 0.1), GcePair(1, 9, 0.9)]) == [GcePair(1, 9, 0.9), GcePair(3, 4, 0.1)]

    @pytest.mark.parametrize("seed", range(8))
    def test_full_pairwise_matches_brute_force(self, seed):
        agg, preds, test = random_instance(100 + seed)
        ctx = SearchContext(agg, preds, test)
        for k in (1, 4, 15):
            got = [p.pair for p in global_ce(ctx, k, strategy="full-pairwise")]
            assert got == brute_force_global(agg, preds.predicted, test, k)

    def test_full_pairwise_blocks(self):
        from ce_forge.ce_search import _global_full_pairwise
        agg, preds, test = random_instance(9, n=120)
        ctx = SearchContext(agg, preds, test)
        assert _global_full_pairwise(ctx, 10, block=7) == _global_full_pairwise(ctx, 10)

    def test_dedup_and_symmetry(self):
        agg, preds, test = random_instance(11, n=80)
        ctx = SearchContext(agg, preds, test)
        pairs = global_ce(ctx, 50)
        assert len({p.pair for p in pairs}) == len(pairs)
        for p in pairs:
            assert p.u < p.v and preds.predicted[p.u] != preds.predicted[p.v]
            assert ctx.pair_ks(p.u, p.v) == ctx.pair_ks(p.v, p.u) == p.ks
        keys = [(-p.ks, p.u, p.v) for p in pairs]
        assert keys == sorted(keys)

    def test_eight_node_within_double_k(self):
        agg, preds, _ = random_instance(3, n=8, d=3, classes=2)
        test = np.arange(8)
        ctx = SearchContext(agg, preds, test)
        k = 3
        top1 = {p.pair for p in global_ce(ctx, k, strategy="per-node-top1")}
        full = {p.pair for p in global_ce(ctx, 2 * k, strategy="full-pairwise")}
        assert top1 <= full

    def test_strategy_discrepancy(self):
        # a chain at 0, 2, 4, 6 degrees with alternating labels plus a far pair at 90/100:
        # the 0-6 pair outranks the far pair yet neither endpoint picks it as its best hit
        agg = angles(0, 2, 4, 6, 90, 100)
        ctx = SearchContext(agg, PredictionTable(np.array([0, 1, 0, 1, 0, 1]), 2), range(6))
        top1 = [p.pair for p in global_ce(ctx, 4, strategy="per-node-top1")]
        full = [p.pair for p in global_ce(ctx, 4, strategy="full-pairwise")]
        assert set(top1) == {(0, 1), (1, 2), (2, 3), (4, 5)}
        assert set(full) == {(0, 1), (1, 2), (2, 3), (0, 3)}

    def test_indexed_global(self, bundle_ctx):
        ctx, idx = bundle_ctx
        pairs = global_ce(ctx, 10, mode="indexed", index=idx)
        exact = global_ce(ctx, 10)
        assert len(pairs) == 10
        for a, b in zip(pairs, exact):
            assert a.ks <= b.ks + 1e-15

    def test_errors(self):
        ctx = SearchContext(np.eye(2), PredictionTable(np.array([0, 1]), 2), [0, 1])
        with pytest.raises(ValueError):
            global_ce(ctx, 0)
        with pytest.raises(ValueError):
            global_ce(ctx, 1, strategy="nope")
        with pytest.raises(ValueError):
            global_ce(ctx, 1, mode="indexed", strategy="full-pairwise")
