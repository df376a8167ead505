"""Toy frozen-base transformer with a Parallel Adapter in every FFN.

Each layer is pre-norm: ``x += attn(norm(x)); x += ffn(norm(x))``. The norm is
parameter-free RMSNorm and the output head is tied to the token embedding.
Everything except the adapters (and optionally the routers) is frozen, so the
backward pass only needs gradients with respect to activations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .adapter import BaseFfn
from .data import PackedBatch
from .experts import ExpertPartition
from .memtier import HostStore, LayerState
from .numerics import make_rng

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ToyModelConfig:
    V: int = 256
    d: int = 64
    L: int = 4
    n: int = 128  # base FFN width
    r: int = 2048
    N: int = 64
    kk: int = 4  # experts per token
    K: int = 64
    seed: int = 0
    precision: str = "f32"  # checkpoint weight precision; compute is float64
    activation: str = "silu"
    router_train: bool = False  # straight-through router updates (not the published method)
    # frozen-base shape knobs
    shared_scale: float = 1.2  # norm of the direction shared by all embeddings, per sqrt(d)
    pos_scale: float = 0.5
    logit_scale: float = 6.0

    def __post_init__(self):
        for name in ("V", "d", "L", "n", "r", "N", "kk", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.r % self.N:
            raise ValueError(f"N={self.N} must divide r={self.r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.activation not in ("silu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def expert_size(self) -> int:
        return self.r // self.N

    @property
    def kk_eff(self) -> int:
        return min(self.kk, self.N)

    @property
    def K_eff(self) -> int:
        """Per-token budget after clamping to the routed capacity."""
        return min(self.K, self.kk_eff * self.expert_size)

    def replace(self, **kw) -> "ToyModelConfig":
        return ToyModelConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def rms_norm(x):
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / rms, rms


def rms_norm_backward(gy, y, rms):
    return (gy - y * np.mean(gy * y, axis=-1, keepdims=True)) / rms


@dataclass
class AttnCache:
    u: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray
    a: np.ndarray


class ToyModel:
    """Frozen base weights, deterministic in ``config.seed``."""

    def __init__(self, config: ToyModelConfig):
        self.config = c = config
        rng = make_rng(c.seed)
        d = c.d
        shared = rng.standard_normal(d)
        shared *= c.shared_scale * np.sqrt(d) / np.linalg.norm(shared)
        self.embed = rng.standard_normal((c.V, d)) + shared
        self.pos = c.pos_scale * rng.standard_normal((64, d))
        self.attn = []
        self.ffn = []
        for _ in range(c.L):
            Wq, Wk, Wv, Wo = (rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(4))
            self.attn.append((Wq, Wk, Wv, Wo))
            self.ffn.append(
                BaseFfn(
                    rng.standard_normal((d, c.n)) / np.sqrt(d),
                    rng.standard_normal((c.n, d)) / np.sqrt(c.n),
                    c.activation,
                )
            )
        # adapter and router initialisation draws from its own stream
        self._adapter_seed = int(rng.integers(0, 2**63 - 1))

    @property
    def partition(self) -> ExpertPartition:
        return ExpertPartition(self.config.N, self.config.r)

    def init_store(self) -> HostStore:
        """Fresh adapters: W_A uniform in ±1/sqrt(d), W_B zero, router Gaussian."""
        c = self.config
        rng = make_rng(self._adapter_seed)
        layers = []
        bound = 1.0 / np.sqrt(c.d)
        for _ in range(c.L):
            W_A = rng.uniform(-bound, bound, size=(c.d, c.r))
            W_B = np.zeros((c.r, c.d))
            W_g = rng.standard_normal((c.N, c.d)) / np.sqrt(c.d)
            layers.append(LayerState.fresh(W_A, W_B, W_g, router_trainable=c.router_train))
        return HostStore(layers=layers, step=0, config=c.to_dict())

    def frozen_state(self) -> list[np.ndarray]:
        out = [self.embed, self.pos]
        for (Wq, Wk, Wv, Wo), f in zip(self.attn, self.ffn):
            out += [Wq, Wk, Wv, Wo, f.W_k, f.W_v]
        return out

    # -- attention --------------------------------------------------------------

    @staticmethod
    def attention_mask(batch: PackedBatch) -> np.ndarray:
        seg = batch.segments
        l = seg.shape[1]
        causal = np.tril(np.ones((l, l), dtype=bool))
        same = seg[:, :, None] == seg[:, None, :]
        mask = same & causal & (seg[:, :, None] >= 0)
        mask |= np.eye(l, dtype=bool)  # padding attends to itself
        return mask

    def attention(self, layer: int, u: np.ndarray, mask: np.ndarray):
        Wq, Wk, Wv, Wo = self.attn[layer]
        B, l = mask.shape[:2]
        d = u.shape[1]
        q = (u @ Wq).reshape(B, l, d)
        k = (u @ Wk).reshape(B, l, d)
        v = (u @ Wv).reshape(B, l, d)
        s = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(d)
        s = np.where(mask, s, -np.inf)
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        a = np.matmul(p, v).reshape(B * l, d)
        return a @ Wo, AttnCache(u, q, k, v, p, a)

    def attention_backward(self, layer: int, g_out: np.ndarray, cache: AttnCache):
        Wq, Wk, Wv, Wo = self.attn[layer]
        B, l, d = cache.q.shape
        g_a = (g_out @ Wo.T).reshape(B, l, d)
        g_p = np.matmul(g_a, cache.v.transpose(0, 2, 1))
        g_v = np.matmul(cache.p.transpose(0, 2, 1), g_a)
        g_s = cache.p * (g_p - np.sum(g_p * cache.p, axis=-1, keepdims=True)) / np.sqrt(d)
        g_q = np.matmul(g_s, cache.k)
        g_k = np.matmul(g_s.transpose(0, 2, 1), cache.q)
        flat = lambda x: x.reshape(B * l, d)
        return flat(g_q) @ Wq.T + flat(g_k) @ Wk.T + flat(g_v) @ Wv.T

    # -- full model -------------------------------------------------------------

    def forward(self, batch: PackedBatch, ffn_path, valid=None):
        """Returns logits ``(B*l, V)`` and the cache for :meth:`backward`.

        ``ffn_path`` supplies ``forward(layer, u, base, valid)`` and
        ``backward(layer, grad)`` for the FFN sublayer.
        """
        mask = self.attention_mask(batch)
        x = self.embed[batch.tokens.reshape(-1)] + self.pos[batch.positions.reshape(-1)]
        caches = []
        for i in range(self.config.L):
            u1, r1 = rms_norm(x)
            att, ac = self.attention(i, u1, mask)
            x = x + att
            u2, r2 = rms_norm(x)
            x = x + ffn_path.forward(i, u2, self.ffn[i], valid)
            caches.append((u1, r1, ac, u2, r2))
        uf, rf = rms_norm(x)
        logits = self.config.logit_scale / np.sqrt(self.config.d) * (uf @ self.embed.T)
        return logits, (caches, uf, rf)

    def backward(self, g_logits: np.ndarray, cache, ffn_path) -> None:
        caches, uf, rf = cache
        g_uf = self.config.logit_scale / np.sqrt(self.config.d) * (g_logits @ self.embed)
        g_x = rms_norm_backward(g_uf, uf, rf)
        for i in reversed(range(self.config.L)):
            u1, r1, ac, u2, r2 = caches[i]
            g_u2 = ffn_path.backward(i, g_x)
            g_x = g_x + rms_norm_backward(g_u2, u2, r2)
            g_u1 = self.attention_backward(i, g_x, ac)
            g_x = g_x + rms_norm_backward(g_u1, u1, r1)


def cross_entropy(logits: np.ndarray, batch: PackedBatch):
    """Mean CE over object-token targets; returns (loss, dlogits)."""
    mask = batch.loss_mask.reshape(-1)
    targets = batch.targets.reshape(-1)
    n = int(mask.sum())
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(mask)
    loss = -logp[rows, targets[rows]].sum() / n
    g = np.zeros_like(logits)
    g[rows] = np.exp(logp[rows])
    g[rows, targets[rows]] -= 1.0
    g[rows] /= n
    return float(loss), g
