import warnings

import numpy as np
import pytest

from conftest import random_layer
from meft.adapter import AdapterWeights, dense_ffn_pa, gather_adapter, sparse_ffn_pa, topk_select
from meft.experts import (
    ExpertPartition,
    FlopCounter,
    Router,
    cpu_flops,
    divisors,
    ke_select,
    meft_backward,
    meft_ffn,
    optimal_expert_count,
    route_scores,
    select_experts,
)
from meft.memtier import CommMeter, HostStore, LayerState, MemTier
from meft.numerics import ShapeError


def test_route_scores_examples():
    router = Router(np.eye(2))
    np.testing.assert_allclose(route_scores([0.3, 0.7], router), [0.3, 0.7])
    np.testing.assert_array_equal(route_scores(np.zeros(2), router), [0.0, 0.0])
    assert route_scores([1.0, 2.0], Router(np.array([[1.0, 1.0]]))).shape == (1,)
    with pytest.raises(ShapeError):
        route_scores([1.0, 2.0, 3.0], router)


def test_select_experts_examples():
    assert select_experts(np.array([0.3, 0.7]), 1).tolist() == [1]
    assert select_experts(np.zeros(4), 2).tolist() == [0, 1]
    assert select_experts(np.array([3.0, 1.0, 2.0]), 3).tolist() == [0, 1, 2]
    assert select_experts(np.array([3.0, 1.0, 2.0]), 7).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        select_experts(np.zeros(3), 0)


def test_partition_layout():
    part = ExpertPartition(4, 12)
    assert part.expert_size == 3
    cover = [i for e in range(4) for i in part.neurons(e)]
    assert cover == list(range(12))
    assert part.expert_of([0, 2, 3, 11]).tolist() == [0, 0, 1, 3]
    with pytest.raises(ValueError):
        ExpertPartition(5, 12)
    with pytest.raises(ValueError):
        ExpertPartition(0, 12)


def _ke(rng, T, d, N, r, kk, K):
    h = rng.standard_normal((T, d))
    W_A = rng.standard_normal((d, r))
    router = Router(rng.standard_normal((N, d)))
    return h, W_A, router, ke_select(h, router, ExpertPartition(N, r), W_A, kk, K)


@pytest.mark.parametrize("N,kk", [(1, 1), (1, 3), (4, 4), (4, 9)])
def test_ke_select_degenerates_to_topk(rng, N, kk):
    for _ in range(10):
        h, W_A, router, sel = _ke(rng, 5, 3, N, 16, kk, 5)
        ref = topk_select(h, W_A, 5)
        np.testing.assert_array_equal(sel.per_token, ref.per_token)
        np.testing.assert_array_equal(sel.union, ref.union)


def test_ke_select_routing_restricts_search():
    # expert 0 holds the global maximum, but the router only admits expert 1
    h = np.array([[1.0, 0.0]])
    W_A = np.array([[9.0, 8.0, 1.0, 2.0], [0.0, 0.0, 0.0, 0.0]])
    router = Router(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    sel = ke_select(h, router, ExpertPartition(2, 4), W_A, 1, 1)
    assert sel.per_token.tolist() == [[3]]
    assert sel.experts.tolist() == [[1]]


def test_ke_select_reduction_and_budget(rng):
    for _ in range(30):
        N = int(rng.choice([2, 4, 8]))
        kk = int(rng.integers(1, N + 1))
        r = N * int(rng.integers(1, 5))
        es = r // N
        K = int(rng.integers(1, kk * es + 1))
        h, W_A, router, sel = _ke(rng, int(rng.integers(1, 6)), 3, N, r, kk, K)
        assert sel.per_token.shape[1] == min(K, kk * es)
        for t in range(sel.per_token.shape[0]):
            assert set((sel.per_token[t] // es).tolist()) <= set(sel.experts[t].tolist())
            assert len(set(sel.experts[t].tolist())) == min(kk, N)
        np.testing.assert_array_equal(sel.union, np.unique(sel.per_token))


def test_ke_select_clamps_k(rng):
    with pytest.warns(UserWarning, match="clamping"):
        *_, sel = _ke(rng, 3, 3, 4, 8, 1, 5)
    assert sel.per_token.shape == (3, 2)
    with pytest.raises(ValueError):
        _ke(rng, 3, 3, 4, 8, 1, 0)


def test_ke_select_counts_flops(rng):
    h = rng.standard_normal((6, 3))
    counter = FlopCounter()
    ke_select(h, Router(rng.standard_normal((4, 3))), ExpertPartition(4, 16), rng.standard_normal((3, 16)), 2, 3, counter)
    assert counter.report().to_dict() == cpu_flops(6, 3, 4, 16, 2).to_dict()
    assert counter.expert_hits.sum() == 12


def test_cpu_flops_examples():
    rep = cpu_flops(1, 2, 2, 4, 1)
    assert (rep.router_flops, rep.expert_scoring_flops, rep.total) == (4, 4, 8)
    assert cpu_flops(3, 5, 4, 16, 4).total == 3 * 5 * (4 + 16)
    with pytest.raises(ValueError):
        cpu_flops(1, 2, 3, 4, 1)


def test_cpu_flops_minimum_over_divisors():
    totals = {N: cpu_flops(128, 64, N, 4096, 4).total for N in divisors(4096)}
    assert min(totals, key=totals.get) == 128
    assert optimal_expert_count(4096, 4) == 128
    # with power-of-two r the grid minimum is within a factor 2 of the
    # continuous optimum; a prime r has no divisor near sqrt(kk r) at all
    assert cpu_flops(1, 1, optimal_expert_count(97, 1), 97, 1).total == 98
    for r in (16, 256, 2048, 4096, 6144):
        for kk in (1, 2, 4):
            best = cpu_flops(1, 1, optimal_expert_count(r, kk), r, kk).total
            assert best <= 2 * 2 * np.sqrt(kk * r)


def test_optimal_expert_count_examples():
    assert optimal_expert_count(16, 1) == 4
    assert optimal_expert_count(16, 4) == 8
    assert optimal_expert_count(13, 1) == 1  # 1 + 13 == 13 + 1, smaller N wins
    assert optimal_expert_count(13, 2) == 13  # 1 + 26 > 13 + 2
    assert divisors(12) == [1, 2, 3, 4, 6, 12]


def _tier(rng, d, n, r, N, mode="meft", pipeline=False):
    base, adapter = random_layer(rng, d, n, r)
    ls = LayerState.fresh(adapter.W_A.copy(), adapter.W_B.copy(), rng.standard_normal((N, d)))
    tier = MemTier(HostStore([ls]), ExpertPartition(N, r), mode, CommMeter(1), pipeline)
    tier.begin_step()
    return base, adapter, tier


def test_meft_ffn_full_cover_equals_dense(rng):
    base, adapter, tier = _tier(rng, 4, 5, 8, 2)
    h = rng.standard_normal((3, 4))
    out = meft_ffn(h, base, tier, 0, kk=2, K=8)
    np.testing.assert_array_equal(out, dense_ffn_pa(h, base, adapter))


def test_meft_ffn_union_applies_to_every_token(rng):
    d, r = 2, 4
    base, _ = random_layer(rng, d, 3, r)
    W_A = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    W_B = rng.standard_normal((r, d))
    ls = LayerState.fresh(W_A.copy(), W_B.copy(), np.ones((1, d)))
    tier = MemTier(HostStore([ls]), ExpertPartition(1, r), meter=CommMeter(1))
    tier.begin_step()
    h = np.array([[1.0, 0.2], [0.1, 1.0]])  # token 0 picks neuron 0, token 1 picks 3
    out = meft_ffn(h, base, tier, 0, kk=1, K=1)
    assert tier.working[0].S.tolist() == [0, 3]
    masked = AdapterWeights(np.zeros_like(W_A), np.zeros_like(W_B))
    masked.W_A[:, [0, 3]] = W_A[:, [0, 3]]
    masked.W_B[[0, 3]] = W_B[[0, 3]]
    np.testing.assert_allclose(out, dense_ffn_pa(h, base, masked), atol=1e-14)
    # token 1 still sees neuron 0, which it did not select itself
    assert h[1] @ W_A[:, 0] > 0


def test_meft_backward_stages_only_the_union(rng):
    base, adapter, tier = _tier(rng, 4, 5, 16, 4)
    h = rng.standard_normal((3, 4))
    meft_ffn(h, base, tier, 0, kk=1, K=2)
    S = tier.working[0].S
    grad_h = meft_backward(rng.standard_normal((3, 4)), tier, 0)
    ls = tier.store.layers[0]
    assert grad_h.shape == h.shape
    assert np.flatnonzero(ls.staged).tolist() == S.tolist()
    untouched = np.setdiff1d(np.arange(16), S)
    assert not ls.g_A[:, untouched].any() and not ls.g_B[untouched].any()
    assert 0 not in tier.working
    with pytest.raises(RuntimeError):
        meft_backward(np.zeros((3, 4)), tier, 0)


def test_meft_ffn_pipeline_identical(rng):
    outs = []
    for pipeline in (False, True):
        base, _, tier = _tier(np.random.default_rng(7), 6, 5, 32, 8, pipeline=pipeline)
        h = np.random.default_rng(8).standard_normal((10, 6))
        outs.append(meft_ffn(h, base, tier, 0, kk=2, K=3))
        tier.close()
    np.testing.assert_array_equal(outs[0], outs[1])
