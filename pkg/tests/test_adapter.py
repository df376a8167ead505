import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_layer
from meft.adapter import (
    AdapterWeights,
    BaseFfn,
    activation_profile,
    dense_ffn_pa,
    gather_adapter,
    sparse_backward,
    sparse_ffn_pa,
    topk_select,
)
from meft.numerics import ShapeError, finite_diff_grad, relu, silu


def scalar_ffn_pa(h, W_k, W_v, W_A, W_B):
    """Per-element loop: silu base path plus ReLU adapter path."""
    T, d = len(h), len(h[0])
    n, r = len(W_k[0]), len(W_A[0])
    out = [[0.0] * d for _ in range(T)]
    for t in range(T):
        hid = [sum(h[t][i] * W_k[i][j] for i in range(d)) for j in range(n)]
        hid = [x / (1.0 + np.exp(-x)) for x in hid]
        ad = [max(0.0, sum(h[t][i] * W_A[i][j] for i in range(d))) for j in range(r)]
        for o in range(d):
            out[t][o] = sum(hid[j] * W_v[j][o] for j in range(n)) + sum(ad[j] * W_B[j][o] for j in range(r))
    return np.array(out)


def test_dense_zero_adapter_is_base(rng):
    base, _ = random_layer(rng, 4, 6, 5)
    zero = AdapterWeights(np.zeros((4, 5)), np.zeros((5, 4)))
    h = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(dense_ffn_pa(h, base, zero), silu(h @ base.W_k) @ base.W_v)


@pytest.mark.parametrize("activation", ["silu", "relu"])
def test_dense_zero_input(rng, activation):
    base, adapter = random_layer(rng, 4, 6, 5, activation)
    np.testing.assert_array_equal(dense_ffn_pa(np.zeros((2, 4)), base, adapter), np.zeros((2, 4)))


def test_dense_hand_set_weights():
    W_k = [[1.0, -1.0], [0.5, 2.0]]
    W_v = [[1.0, 0.0], [0.25, -1.0]]
    W_A = [[1.0, -2.0], [0.0, 1.0]]
    W_B = [[0.5, 1.0], [-1.0, 2.0]]
    h = [[1.0, 2.0], [-1.0, 0.5]]
    base = BaseFfn(np.array(W_k), np.array(W_v), "silu")
    adapter = AdapterWeights(np.array(W_A), np.array(W_B))
    np.testing.assert_allclose(
        dense_ffn_pa(np.array(h), base, adapter), scalar_ffn_pa(h, W_k, W_v, W_A, W_B), rtol=1e-14
    )


def test_dense_shape_mismatch(rng):
    base, adapter = random_layer(rng, 4, 6, 5)
    with pytest.raises(ShapeError):
        dense_ffn_pa(np.ones((2, 3)), base, adapter)


def test_topk_select_all_and_ties(rng):
    _, adapter = random_layer(rng, 3, 4, 6)
    h = rng.standard_normal((5, 3))
    sel = topk_select(h, adapter.W_A, 6)
    assert sel.union.tolist() == list(range(6))
    assert all(row.tolist() == list(range(6)) for row in sel.per_token)
    sel = topk_select(np.zeros((4, 3)), adapter.W_A, 2)
    assert all(row.tolist() == [0, 1] for row in sel.per_token)
    assert sel.union.tolist() == [0, 1]


def test_topk_select_hand_example():
    W_A = np.array([[1.0, 0.0, -1.0, 0.5], [0.0, 1.0, 0.0, 0.5]])
    h = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(h @ W_A, [[1.0, 2.0, -1.0, 1.5]])
    sel = topk_select(h, W_A, 2)
    assert sel.union.tolist() == [1, 3]


def test_topk_select_clamps_with_warning(rng):
    with pytest.warns(UserWarning, match="clamping"):
        sel = topk_select(rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), 9)
    assert sel.per_token.shape == (2, 4)
    with pytest.raises(ValueError):
        topk_select(rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 12), st.integers(1, 14))
def test_topk_select_properties(seed, T, r, K):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((T, 3))
    W_A = rng.standard_normal((3, r))
    Kc = min(K, r)
    with pytest.warns(UserWarning) if K > r else _nullctx():
        a = topk_select(h, W_A, K)
    b = topk_select(h, W_A, Kc)
    np.testing.assert_array_equal(a.per_token, b.per_token)
    assert a.per_token.shape == (T, Kc)
    assert a.union.size <= min(r, T * Kc)
    assert np.all(np.diff(a.union) > 0)
    np.testing.assert_array_equal(a.union, np.unique(a.per_token))
    # the selected keys outscore every unselected key of that token
    scores = h @ W_A
    for t in range(T):
        chosen = scores[t, a.per_token[t]]
        rest = np.delete(scores[t], a.per_token[t])
        if rest.size:
            assert chosen.min() >= rest.max()


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def test_gather_adapter(rng):
    _, adapter = random_layer(rng, 3, 4, 5)
    WA, WB = gather_adapter(adapter, np.arange(5))
    np.testing.assert_array_equal(WA, adapter.W_A)
    np.testing.assert_array_equal(WB, adapter.W_B)
    WA, WB = gather_adapter(adapter, [])
    assert WA.shape == (3, 0) and WB.shape == (0, 3)
    with pytest.raises(ValueError, match="sorted"):
        gather_adapter(adapter, [2, 0])
    with pytest.raises(IndexError, match="7"):
        gather_adapter(adapter, [1, 7])


def test_sparse_full_gather_is_bitwise_dense(rng):
    for _ in range(10):
        base, adapter = random_layer(rng, 5, 7, 9)
        h = rng.standard_normal((4, 5))
        out, _ = sparse_ffn_pa(h, base, *gather_adapter(adapter, np.arange(9)))
        np.testing.assert_array_equal(out, dense_ffn_pa(h, base, adapter))


def test_sparse_empty_selection_is_base(rng):
    base, adapter = random_layer(rng, 5, 7, 9)
    h = rng.standard_normal((4, 5))
    out, _ = sparse_ffn_pa(h, base, *gather_adapter(adapter, []))
    np.testing.assert_array_equal(out, silu(h @ base.W_k) @ base.W_v)


def test_sparse_matches_zero_masked_dense(rng):
    for _ in range(30):
        d, n, r = rng.integers(2, 8), rng.integers(2, 8), rng.integers(2, 16)
        base, adapter = random_layer(rng, d, n, r)
        h = rng.standard_normal((rng.integers(1, 6), d))
        S = np.sort(rng.choice(r, size=rng.integers(0, r + 1), replace=False))
        masked = AdapterWeights(np.zeros_like(adapter.W_A), np.zeros_like(adapter.W_B))
        masked.W_A[:, S] = adapter.W_A[:, S]
        masked.W_B[S] = adapter.W_B[S]
        out, _ = sparse_ffn_pa(h, base, *gather_adapter(adapter, S))
        np.testing.assert_allclose(out, dense_ffn_pa(h, base, masked), rtol=0, atol=1e-12)


def test_sparse_shape_mismatch(rng):
    base, adapter = random_layer(rng, 5, 7, 9)
    WA, WB = gather_adapter(adapter, [0, 1])
    with pytest.raises(ShapeError):
        sparse_ffn_pa(np.ones((2, 5)), base, WA, WB[:1])


def _loss_fn(h, base, WA, WB, G):
    out, _ = sparse_ffn_pa(h, base, WA, WB)
    return float(np.sum(out * G))


def test_backward_zero_grad_out(rng):
    base, adapter = random_layer(rng, 4, 5, 6)
    h = rng.standard_normal((3, 4))
    WA, WB = gather_adapter(adapter, [0, 2, 5])
    _, cache = sparse_ffn_pa(h, base, WA, WB)
    for g in sparse_backward(np.zeros((3, 4)), cache, WA, WB):
        np.testing.assert_array_equal(g, 0.0)


def test_backward_dead_neurons(rng):
    base, _ = random_layer(rng, 4, 5, 6)
    h = np.abs(rng.standard_normal((3, 4)))
    WA = -np.abs(rng.standard_normal((4, 3)))  # every pre-activation negative
    WB = rng.standard_normal((3, 4))
    _, cache = sparse_ffn_pa(h, base, WA, WB)
    gA, gB, _ = sparse_backward(rng.standard_normal((3, 4)), cache, WA, WB)
    np.testing.assert_array_equal(gA, 0.0)
    np.testing.assert_array_equal(gB, 0.0)


def test_backward_cache_mismatch(rng):
    base, adapter = random_layer(rng, 4, 5, 6)
    WA, WB = gather_adapter(adapter, [0, 1])
    _, cache = sparse_ffn_pa(rng.standard_normal((3, 4)), base, WA, WB)
    with pytest.raises(ShapeError):
        sparse_backward(np.zeros((2, 4)), cache, WA, WB)


def relative_errors(analytic, numeric):
    mask = np.abs(analytic) > 1e-8
    return np.abs(analytic[mask] - numeric[mask]) / np.abs(analytic[mask])


def check_gradients(rng, d, n, r, K, T, activation="silu"):
    base, adapter = random_layer(rng, d, n, r, activation)
    h = rng.standard_normal((T, d))
    S = topk_select(h, adapter.W_A, K).union
    WA, WB = gather_adapter(adapter, S)
    G = rng.standard_normal((T, d))
    _, cache = sparse_ffn_pa(h, base, WA, WB)
    gA, gB, gh = sparse_backward(G, cache, WA, WB)
    num_A = finite_diff_grad(lambda x: _loss_fn(h, base, x, WB, G), WA, 1e-5)
    num_B = finite_diff_grad(lambda x: _loss_fn(h, base, WA, x, G), WB, 1e-5)
    num_h = finite_diff_grad(lambda x: _loss_fn(x, base, WA, WB, G), h, 1e-5)
    errs = np.concatenate([relative_errors(gA, num_A), relative_errors(gB, num_B), relative_errors(gh, num_h)])
    return errs


def test_backward_matches_finite_differences(rng):
    worst = 0.0
    for i in range(20):
        d, n, r = rng.integers(2, 9), rng.integers(2, 9), rng.integers(2, 17)
        errs = check_gradients(rng, d, n, r, K=int(rng.integers(1, r + 1)), T=int(rng.integers(1, 5)),
                               activation="silu" if i % 2 else "relu")
        worst = max(worst, errs.max(initial=0.0))
    assert worst < 1e-5


def test_activation_profile_degenerate_and_single():
    adapter = AdapterWeights(np.eye(3), np.zeros((3, 3)))
    prof = activation_profile(adapter, [np.zeros((4, 3))])
    np.testing.assert_array_equal(prof.sorted_means, 0.0)
    np.testing.assert_array_equal(prof.cumulative, 0.0)
    h = np.array([[0.0, 2.0, 0.0], [0.0, 1.0, 0.0]])
    prof = activation_profile(adapter, [h])
    np.testing.assert_array_equal(prof.sorted_means, [1.0, 0.0, 0.0])
    assert prof.cumulative[0] == 1.0
    with pytest.raises(ValueError):
        activation_profile(adapter, [])


def test_activation_profile_is_sorted_and_normalized(rng):
    _, adapter = random_layer(rng, 4, 4, 12)
    prof = activation_profile(adapter, [rng.standard_normal((10, 4)) for _ in range(3)])
    assert np.all(np.diff(prof.sorted_means) <= 0)
    assert prof.sorted_means[0] == 1.0 and prof.sorted_means[-1] == 0.0
    assert np.all(np.diff(prof.cumulative) >= 0)
    assert prof.cumulative[-1] == pytest.approx(1.0)
    assert 0.2 <= prof.mass_in_top(0.2) <= 1.0
