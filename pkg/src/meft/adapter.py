"""Parallel Adapter FFN and its top-K sparse variant.

The adapter is a wide ReLU FFN ``ReLU(h @ W_A) @ W_B`` added next to a frozen
base FFN ``f(h @ W_k) @ W_v``. Each of the ``r`` columns of ``W_A`` is a key and
the matching row of ``W_B`` its value. The sparse path selects the top-K keys
per token, gathers only those key/value pairs and runs the same computation on
the narrower slice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .numerics import ShapeError, matmul, relu, silu, silu_grad

ACTIVATIONS = ("silu", "relu")


@dataclass
class BaseFfn:
    """Frozen FFN of the base model. Never updated by training."""

    W_k: np.ndarray  # d x n
    W_v: np.ndarray  # n x d
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W_k.shape[1] != self.W_v.shape[0] or self.W_k.shape[0] != self.W_v.shape[1]:
            raise ShapeError(f"base FFN shapes disagree: {self.W_k.shape}, {self.W_v.shape}")

    @property
    def d(self) -> int:
        return self.W_k.shape[0]

    def act(self, x):
        return silu(x) if self.activation == "silu" else relu(x)

    def act_grad(self, x):
        return silu_grad(x) if self.activation == "silu" else (x > 0).astype(x.dtype)


@dataclass
class AdapterWeights:
    W_A: np.ndarray  # d x r, keys as columns
    W_B: np.ndarray  # r x d, values as rows

    def __post_init__(self):
        if self.W_A.shape[1] != self.W_B.shape[0] or self.W_A.shape[0] != self.W_B.shape[1]:
            raise ShapeError(f"adapter shapes disagree: {self.W_A.shape}, {self.W_B.shape}")
        if self.W_A.shape[1] < 1:
            raise ValueError("adapter needs at least one key-value pair")

    @property
    def d(self) -> int:
        return self.W_A.shape[0]

    @property
    def r(self) -> int:
        return self.W_A.shape[1]


@dataclass(frozen=True)
class SelectionSet:
    """Per-token selected neuron indices and their batch-level union.

    ``per_token`` is a ``(T, k)`` int array with each row sorted ascending;
    ``union`` is the sorted, deduplicated set of all selected indices.
    """

    per_token: np.ndarray
    union: np.ndarray
    K: int
    experts: np.ndarray | None = None  # routed experts per token, when routing was used

    @classmethod
    def from_per_token(cls, per_token: np.ndarray, K: int, experts=None) -> "SelectionSet":
        per_token = np.sort(np.asarray(per_token, dtype=np.int64), axis=1)
        return cls(per_token=per_token, union=np.unique(per_token), K=K, experts=experts)

    @property
    def size(self) -> int:
        return int(self.union.size)


class FfnCache(NamedTuple):
    h: np.ndarray
    z: np.ndarray  # adapter pre-activations h @ W_A_K
    base_pre: np.ndarray  # h @ W_k
    base: BaseFfn


def _check_d(h: np.ndarray, d: int):
    if h.ndim != 2 or h.shape[1] != d:
        raise ShapeError(f"hidden states {h.shape} do not match model dim {d}")


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, ascending.

    Ties at the cut-off go to the lower index.
    """
    T, n = scores.shape
    if k >= n:
        return np.broadcast_to(np.arange(n), (T, n)).copy()
    thr = np.partition(scores, n - k, axis=1)[:, n - k : n - k + 1]
    above = scores > thr
    need = k - above.sum(axis=1, keepdims=True)
    at = scores == thr
    keep = above | (at & (np.cumsum(at, axis=1) <= need))
    return np.nonzero(keep)[1].reshape(T, k)


def base_ffn(h: np.ndarray, base: BaseFfn) -> np.ndarray:
    return matmul(base.act(matmul(h, base.W_k)), base.W_v)


def dense_ffn_pa(h: np.ndarray, base: BaseFfn, adapter: AdapterWeights) -> np.ndarray:
    """Base FFN plus the full-width adapter, for every token."""
    _check_d(h, base.d)
    if adapter.d != base.d:
        raise ShapeError(f"adapter dim {adapter.d} != base dim {base.d}")
    return base_ffn(h, base) + matmul(relu(matmul(h, adapter.W_A)), adapter.W_B)


def topk_select(h: np.ndarray, W_A: np.ndarray, K: int) -> SelectionSet:
    """Top-K keys per token ranked by the raw score ``h @ W_A`` (no ReLU first)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    _check_d(h, W_A.shape[0])
    r = W_A.shape[1]
    if K > r:
        warnings.warn(f"K={K} exceeds r={r}; clamping to r", stacklevel=2)
        K = r
    scores = matmul(h, W_A)
    return SelectionSet.from_per_token(topk_rows(scores, K), K)


def _check_indices(S: np.ndarray, r: int) -> np.ndarray:
    S = np.asarray(S, dtype=np.int64).reshape(-1)
    if S.size:
        bad = S[(S < 0) | (S >= r)]
        if bad.size:
            raise IndexError(f"neuron index {int(bad[0])} out of range for r={r}")
        if np.any(np.diff(S) <= 0):
            raise ValueError("selection indices must be sorted ascending without duplicates")
    return S


def gather_adapter(adapter: AdapterWeights, S) -> tuple[np.ndarray, np.ndarray]:
    """Column-gather of W_A and row-gather of W_B at the selected indices."""
    S = _check_indices(S, adapter.r)
    return adapter.W_A[:, S], adapter.W_B[S, :]


def sparse_ffn_pa(
    h: np.ndarray,
    base: BaseFfn,
    W_A_K: np.ndarray,
    W_B_K: np.ndarray,
    base_pre: np.ndarray | None = None,
) -> tuple[np.ndarray, FfnCache]:
    """Base FFN plus the gathered adapter slice, for every token.

    ``base_pre`` lets a caller that already computed ``h @ W_k`` (while the host
    was busy selecting) pass it in; the result is bit-identical either way.
    """
    _check_d(h, base.d)
    if W_A_K.shape[0] != base.d or W_B_K.shape != (W_A_K.shape[1], base.d):
        raise ShapeError(f"gathered slices {W_A_K.shape}, {W_B_K.shape} do not fit d={base.d}")
    if base_pre is None:
        base_pre = matmul(h, base.W_k)
    out = matmul(base.act(base_pre), base.W_v)
    z = matmul(h, W_A_K)
    if z.shape[1]:
        out = out + matmul(relu(z), W_B_K)
    else:
        # empty selection contributes exactly nothing
        out = out + 0.0
    return out, FfnCache(h=h, z=z, base_pre=base_pre, base=base)


def sparse_backward(
    grad_out: np.ndarray, cache: FfnCache, W_A_K: np.ndarray, W_B_K: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for the gathered slices and for the layer input.

    Returns ``(grad_W_A_K, grad_W_B_K, grad_h)``. ``grad_h`` includes the frozen
    base path; the base weights themselves get no gradient.
    """
    h, z, base_pre, base = cache
    if grad_out.shape != h.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match cached input {h.shape}")
    if W_A_K.shape != (h.shape[1], z.shape[1]) or W_B_K.shape != (z.shape[1], h.shape[1]):
        raise ShapeError("gathered slices do not match the cache")
    a = relu(z)
    grad_W_B_K = matmul(a.T, grad_out)
    grad_z = matmul(grad_out, W_B_K.T) * (z > 0)
    grad_W_A_K = matmul(h.T, grad_z)
    grad_base_pre = matmul(grad_out, base.W_v.T) * base.act_grad(base_pre)
    grad_h = matmul(grad_base_pre, base.W_k.T) + matmul(grad_z, W_A_K.T)
    return grad_W_A_K, grad_W_B_K, grad_h


class ActivationProfile(NamedTuple):
    sorted_means: np.ndarray  # min-max normalized, descending
    cumulative: np.ndarray  # running share of total activation mass

    def mass_in_top(self, fraction: float) -> float:
        """Share of activation mass carried by the top ``fraction`` of neurons."""
        n = max(1, int(np.ceil(fraction * self.cumulative.size)))
        return float(self.cumulative[n - 1])


def activation_profile(
    adapter: AdapterWeights, corpus: Iterable[np.ndarray]
) -> ActivationProfile:
    total = np.zeros(adapter.r)
    count = 0
    for h in corpus:
        _check_d(h, adapter.d)
        total += relu(matmul(h, adapter.W_A)).sum(axis=0)
        count += h.shape[0]
    if count == 0:
        raise ValueError("activation profile needs a non-empty corpus")
    means = np.sort(total / count)[::-1]
    mass = means.sum()
    if mass <= 0:
        return ActivationProfile(np.zeros_like(means), np.zeros_like(means))
    lo, hi = means.min(), means.max()
    norm = (means - lo) / (hi - lo) if hi > lo else np.ones_like(means)
    return ActivationProfile(norm, np.cumsum(means) / mass)
