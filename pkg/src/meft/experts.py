"""Key-Experts routing: partition the adapter's neurons into N contiguous
experts, route each token to its top-𝕂 experts with a linear router, then run
the top-K key search only inside those experts.

Router scores are raw dot products. There is no softmax and no score-weighted
mixing; a selected neuron contributes through the plain ReLU adapter path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .adapter import BaseFfn, SelectionSet, sparse_backward, sparse_ffn_pa, topk_rows
from .numerics import ShapeError, matmul


@dataclass
class Router:
    W_g: np.ndarray  # N x d

    @property
    def N(self) -> int:
        return self.W_g.shape[0]


@dataclass(frozen=True)
class ExpertPartition:
    N: int
    r: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("need at least one expert")
        if self.r % self.N:
            raise ValueError(f"expert count N={self.N} must divide r={self.r}")

    @property
    def expert_size(self) -> int:
        return self.r // self.N

    def neurons(self, expert: int) -> range:
        es = self.expert_size
        return range(expert * es, (expert + 1) * es)

    def expert_of(self, neuron):
        return np.asarray(neuron) // self.expert_size


@dataclass
class FlopReport:
    T: int
    router_flops: int
    expert_scoring_flops: int

    @property
    def total(self) -> int:
        return self.router_flops + self.expert_scoring_flops

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "router_flops": self.router_flops,
            "expert_scoring_flops": self.expert_scoring_flops,
            "total": self.total,
        }


@dataclass
class FlopCounter:
    """Multiply-accumulates actually executed by host-side selection."""

    router: int = 0
    expert_scoring: int = 0
    tokens: int = 0
    expert_hits: np.ndarray | None = field(default=None, repr=False)

    def record_experts(self, tau: np.ndarray, N: int):
        if self.expert_hits is None:
            self.expert_hits = np.zeros(N, dtype=np.int64)
        np.add.at(self.expert_hits, tau.reshape(-1), 1)

    def report(self) -> FlopReport:
        return FlopReport(self.tokens, self.router, self.expert_scoring)


def route_scores(h: np.ndarray, router: Router) -> np.ndarray:
    """Raw router scores ``W_g · h``: shape (N,) for one token, (T, N) for a batch."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != router.W_g.shape[1]:
        raise ShapeError(f"token dim {h.shape[-1]} != router dim {router.W_g.shape[1]}")
    if h.ndim == 1:
        return matmul(h.reshape(1, -1), router.W_g.T)[0]
    return matmul(h, router.W_g.T)


def select_experts(p: np.ndarray, kk: int) -> np.ndarray:
    """Indices of the kk highest scores, ascending; ties go to the lower index."""
    if kk < 1:
        raise ValueError("experts-per-token must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p2 = p.reshape(1, -1) if single else p
    tau = topk_rows(p2, min(kk, p2.shape[1]))
    return tau[0] if single else tau


def ke_select(
    h: np.ndarray,
    router: Router,
    partition: ExpertPartition,
    W_A: np.ndarray,
    kk: int,
    K: int,
    counter: FlopCounter | None = None,
) -> SelectionSet:
    """Per-token expert routing followed by top-K inside the routed experts.

    Neuron indices are global, so the union needs no remapping.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    T, d = h.shape
    if W_A.shape != (d, partition.r) or router.W_g.shape != (partition.N, d):
        raise ShapeError(
            f"inconsistent shapes: h {h.shape}, W_A {W_A.shape}, W_g {router.W_g.shape}"
        )
    N, es = partition.N, partition.expert_size
    kk = min(kk, N)
    budget = kk * es
    if K > budget:
        warnings.warn(f"K={K} exceeds routed capacity {budget}; clamping", stacklevel=2)
        K = budget

    tau = select_experts(route_scores(h, router), kk)  # (T, kk), ascending
    cand = (tau[:, :, None] * es + np.arange(es)).reshape(T, budget)
    scores = np.empty((T, kk, es))
    # experts are scored one after another, each over the tokens routed to it
    flat = tau.reshape(-1)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(N + 1))
    for e in np.flatnonzero(np.diff(bounds)):
        pairs = order[bounds[e] : bounds[e + 1]]
        rows, slot = np.divmod(pairs, kk)
        scores[rows, slot] = matmul(h[rows], W_A[:, e * es : (e + 1) * es])
    scores = scores.reshape(T, budget)
    local = topk_rows(scores, K)
    chosen = np.take_along_axis(cand, local, axis=1)

    if counter is not None:
        counter.tokens += T
        counter.router += T * N * d
        counter.expert_scoring += T * kk * es * d
        counter.record_experts(tau, N)
    return SelectionSet.from_per_token(chosen, K, experts=tau)


def cpu_flops(T: int, d: int, N: int, r: int, kk: int) -> FlopReport:
    """Host-side cost of routing plus expert-restricted scoring, in MACs."""
    if N < 1 or r % N:
        raise ValueError(f"expert count N={N} must divide r={r}")
    return FlopReport(T, T * N * d, T * kk * (r // N) * d)


def divisors(n: int) -> list[int]:
    small, large = [], []
    i = 1
    while i * i <= n:
        if n % i == 0:
            small.append(i)
            if i != n // i:
                large.append(n // i)
        i += 1
    return small + large[::-1]


def optimal_expert_count(r: int, kk: int) -> int:
    """Divisor of r minimizing ``N + kk * r / N`` (token count and d cancel)."""
    if r < 1:
        raise ValueError("r must be >= 1")
    return min(divisors(r), key=lambda N: (N + kk * (r // N), N))


def meft_ffn(h, base: BaseFfn, tier, layer: int, kk: int, K: int, valid=None):
    """One MEFT FFN layer: host-side selection, metered fetch, sparse compute.

    ``tier`` is a :class:`meft.memtier.MemTier`. Every token is computed against
    the batch union. ``valid`` optionally restricts which rows take part in
    selection (rows that are placeholders during decoding, say).
    """
    store = tier.store
    adapter = store.layers[layer]
    tier.push_hidden(layer, h.shape[0], h.shape[1])
    h_sel = h if valid is None else h[valid]

    def select():
        return ke_select(
            h_sel, Router(adapter.W_g), tier.partition, adapter.W_A, kk, K, tier.flops
        )

    sel, base_pre = tier.overlap(select, lambda: matmul(h, base.W_k), layer)
    ws = tier.fetch(layer, sel.union)
    with tier.timed("compute"):
        out, cache = sparse_ffn_pa(h, base, ws.W_A_K, ws.W_B_K, base_pre=base_pre)
    ws.cache = cache
    ws.selection = sel
    ws.valid = valid
    return out


def meft_backward(grad_out: np.ndarray, tier, layer: int) -> np.ndarray:
    """Backward through a :func:`meft_ffn` call; stages slice gradients on the host."""
    ws = tier.working.get(layer)
    if ws is None or ws.cache is None:
        raise RuntimeError(f"no forward state for layer {layer}")
    with tier.timed("compute"):
        gA, gB, grad_h = sparse_backward(grad_out, ws.cache, ws.W_A_K, ws.W_B_K)
    if tier.store.router_trainable:
        tier.stage_router_grad(layer, _router_grad(grad_out, ws, tier.partition))
    tier.scatter_grads(layer, ws.S, gA, gB)
    return grad_h


def _router_grad(grad_out, ws, partition: ExpertPartition) -> np.ndarray:
    # Straight-through estimate: each routed expert acts as a unit gate in the
    # forward pass, so dL/dp_e is that expert's share of the adapter output
    # projected on grad_out. Not part of the published method.
    sel = ws.selection
    h, z = ws.cache.h, ws.cache.z
    if ws.valid is not None:
        h, z, grad_out = h[ws.valid], z[ws.valid], grad_out[ws.valid]
    grad = np.zeros((partition.N, h.shape[1]))
    if sel.experts is None or z.shape[1] == 0:
        return grad
    contrib = np.maximum(z, 0.0) * matmul(grad_out, ws.W_B_K.T)
    per_expert = np.zeros((h.shape[0], partition.N))
    np.add.at(per_expert.T, partition.expert_of(ws.S), contrib.T)
    gate = np.zeros_like(per_expert)
    np.put_along_axis(gate, sel.experts, 1.0, axis=1)
    return matmul((per_expert * gate).T, h)
