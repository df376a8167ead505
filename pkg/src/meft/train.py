"""Training, evaluation and sweeps on the synthetic fact task.

Three tier modes share one model and one data order:

* ``dense``  - full adapter on the device, textbook Adam; the oracle.
* ``meft``   - host store, Key-Experts selection, sparse transfer, lazy Adam.
* ``brutal`` - same numerics as ``meft`` but every parameter and gradient is
  metered as transferred each step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapter import sparse_backward, sparse_ffn_pa
from .data import FactDataset, PackedBatch, epoch_batches, facts_per_row, pack
from .experts import Router, ke_select, meft_backward, meft_ffn
from .memtier import AdamHyper, CommMeter, HostStore, MemTier, measure_beta
from .model import ToyModel, ToyModelConfig, cross_entropy
from .numerics import make_rng, relu

log = logging.getLogger(__name__)

TIER_MODES = ("dense", "meft", "brutal")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    peak_lr: float = 1e-2
    warmup_frac: float = 0.02
    epochs: int = 60
    batch_size: int = 2
    seq_len: int = 32
    accum_steps: int = 1

    def __post_init__(self):
        if self.peak_lr < 0 or not 0 <= self.warmup_frac < 1:
            raise ValueError("bad learning-rate schedule")
        if min(self.epochs, self.batch_size, self.seq_len, self.accum_steps) < 1:
            raise ValueError("epochs, batch_size, seq_len and accum_steps must be >= 1")

    def warmup_steps(self, total: int) -> int:
        return max(1, round(self.warmup_frac * total))

    def lr(self, step: int, total: int) -> float:
        """Linear warmup to the peak over the first steps, then linear decay to 0."""
        w = self.warmup_steps(total)
        if step < w:
            return self.peak_lr * (step + 1) / w
        return self.peak_lr * max(0, total - step) / max(1, total - w)


# ---------------------------------------------------------------------------
# FFN paths
# ---------------------------------------------------------------------------


class DensePath:
    """Full-width adapters computed in place, gradients accumulated on the store."""

    def __init__(self, store: HostStore):
        self.store = store
        self.caches = {}

    def forward(self, i, u, base, valid=None):
        ls = self.store.layers[i]
        out, cache = sparse_ffn_pa(u, base, ls.W_A, ls.W_B)
        self.caches[i] = cache
        return out

    def backward(self, i, g):
        ls = self.store.layers[i]
        gA, gB, gh = sparse_backward(g, self.caches.pop(i), ls.W_A, ls.W_B)
        ls.g_A += gA
        ls.g_B += gB
        return gh


class TierPath:
    def __init__(self, tier: MemTier, kk: int, K: int):
        self.tier, self.kk, self.K = tier, kk, K

    def forward(self, i, u, base, valid=None):
        return meft_ffn(u, base, self.tier, i, self.kk, self.K, valid)

    def backward(self, i, g):
        return meft_backward(g, self.tier, i)


class EvalPath:
    """Forward-only path; each block of ``group_rows`` tokens shares one union,
    exactly as a training batch of that geometry would."""

    def __init__(self, store: HostStore, model: ToyModel, sparse: bool, group_rows: int):
        self.store, self.model = store, model
        self.sparse, self.group_rows = sparse, group_rows
        c = model.config
        self.kk, self.K = c.kk_eff, c.K_eff

    def forward(self, i, u, base, valid=None):
        ls = self.store.layers[i]
        out = base.act(u @ base.W_k) @ base.W_v
        if not self.sparse:
            return out + relu(u @ ls.W_A) @ ls.W_B

        rows = np.arange(u.shape[0]) if valid is None else np.flatnonzero(valid)
        sel = ke_select(u[rows], Router(ls.W_g), self.model.partition, ls.W_A, self.kk, self.K)
        groups = rows // self.group_rows
        bounds = np.searchsorted(groups, np.arange(u.shape[0] // self.group_rows + 1))
        for g in range(len(bounds) - 1):
            if bounds[g] == bounds[g + 1]:
                continue
            S = np.unique(sel.per_token[bounds[g] : bounds[g + 1]])
            blk = slice(g * self.group_rows, (g + 1) * self.group_rows)
            out[blk] += relu(u[blk] @ ls.W_A[:, S]) @ ls.W_B[S]
        return out

    def backward(self, i, g):
        raise RuntimeError("evaluation path has no backward")


# ---------------------------------------------------------------------------
# optimizer oracle
# ---------------------------------------------------------------------------


def dense_adam_step(store: HostStore, hyper: AdamHyper, lr: float):
    """Textbook Adam on every adapter entry with one global step counter."""
    t = store.step + 1
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for ls in store.layers:
        for w, m, v, g, cnt in ((ls.W_A, ls.m_A, ls.v_A, ls.g_A, ls.t_A), (ls.W_B, ls.m_B, ls.v_B, ls.g_B, ls.t_B)):
            m[...] = hyper.beta1 * m + (1.0 - hyper.beta1) * g
            v[...] = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
            w[...] = w - lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
            cnt[...] = t
            g[...] = 0.0
    store.step = t


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class StepInfo:
    step: int
    lr: float
    loss: float
    unions: list[np.ndarray]  # per layer, the neurons updated this step


@dataclass
class EvalReport:
    epoch: int
    step: int
    em: float
    train_loss: float
    beta: list[dict] = field(default_factory=list)
    comm: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    store: HostStore
    reports: list[EvalReport]
    losses: list[float]
    meter: CommMeter | None
    model: ToyModel
    tier: MemTier | None = None

    @property
    def final_em(self) -> float:
        return self.reports[-1].em if self.reports else float("nan")


class Trainer:
    def __init__(self, config: ToyModelConfig, dataset: FactDataset, schedule: TrainSchedule,
                 tier_mode: str = "meft", pipeline: bool = False, store: HostStore | None = None,
                 hyper: AdamHyper = AdamHyper(), eval_dataset: FactDataset | None = None):
        if tier_mode not in TIER_MODES:
            raise ValueError(f"tier mode must be one of {TIER_MODES}")
        if config.K > config.K_eff:
            log.warning("K=%d exceeds routed capacity %d; clamping", config.K, config.K_eff)
        self.config, self.dataset, self.schedule = config, dataset, schedule
        self.eval_dataset = eval_dataset if eval_dataset is not None else dataset
        self.mode, self.hyper = tier_mode, hyper
        self.model = ToyModel(config)
        self.store = store if store is not None else self.model.init_store()
        self.store.config = config.to_dict()
        self.per_batch = schedule.batch_size * facts_per_row(dataset, schedule.seq_len)
        self.batches_per_epoch = -(-len(dataset) // self.per_batch)
        self.steps_per_epoch = -(-self.batches_per_epoch // schedule.accum_steps)
        self.total_steps = schedule.epochs * self.steps_per_epoch
        self.meter = None
        self.tier = None
        if tier_mode == "dense":
            self.path = DensePath(self.store)
        else:
            self.meter = CommMeter(config.L)
            self.tier = MemTier(self.store, self.model.partition, tier_mode, self.meter, pipeline)
            self.path = TierPath(self.tier, config.kk_eff, config.K_eff)
        self.losses: list[float] = []
        self._epoch_cache: tuple[int, list[PackedBatch]] | None = None

    def _epoch_batches(self, epoch: int) -> list[PackedBatch]:
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            rng = make_rng(self.config.seed * 1_000_003 + epoch + 1)
            batches = list(epoch_batches(self.dataset, self.schedule.batch_size, self.schedule.seq_len, rng))
            self._epoch_cache = (epoch, batches)
        return self._epoch_cache[1]

    def microbatches(self, step: int) -> list[PackedBatch]:
        epoch, within = divmod(step, self.steps_per_epoch)
        a = self.schedule.accum_steps
        return self._epoch_batches(epoch)[within * a : (within + 1) * a]

    def step_once(self) -> StepInfo:
        step = self.store.step
        if step >= self.total_steps:
            raise StopIteration("schedule exhausted")
        lr = self.schedule.lr(step, self.total_steps)
        mbs = self.microbatches(step)
        if self.tier is not None:
            self.tier.begin_step()
        loss_sum = 0.0
        for mb in mbs:
            try:
                with np.errstate(over="raise", invalid="raise"):
                    logits, cache = self.model.forward(mb, self.path)
                    loss, g = cross_entropy(logits, mb)
                    if not math.isfinite(loss):
                        raise DivergenceError(f"loss is {loss} at step {step} (lr={lr:.3g})")
                    self.model.backward(g / len(mbs), cache, self.path)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite activations at step {step} (lr={lr:.3g}): {exc}") from exc
            loss_sum += loss
        unions = [np.flatnonzero(ls.staged) if self.mode != "dense" else np.arange(self.config.r)
                  for ls in self.store.layers]
        if self.tier is not None:
            self.tier.apply_updates(self.hyper, lr)
        else:
            dense_adam_step(self.store, self.hyper, lr)
        for ls in self.store.layers:
            if not (np.all(np.isfinite(ls.W_A)) and np.all(np.isfinite(ls.W_B))):
                raise DivergenceError(f"non-finite adapter weights after step {step}")
        loss = loss_sum / len(mbs)
        self.losses.append(loss)
        return StepInfo(step, lr, loss, unions)

    def evaluate(self, dataset: FactDataset | None = None) -> float:
        return eval_em(self.model, self.store, dataset if dataset is not None else self.eval_dataset,
                       sparse=self.mode != "dense", B=self.schedule.batch_size, l=self.schedule.seq_len)

    def report(self, epoch: int, em: float, losses: list[float]) -> EvalReport:
        rep = EvalReport(epoch=epoch, step=self.store.step, em=em,
                         train_loss=float(np.mean(losses)) if losses else float("nan"))
        if self.meter is not None:
            rep.beta = layer_beta_stats(self.meter, self.config, self.schedule, self.mode)
            rep.comm = dict(self.meter.totals, total=self.meter.total)
            rep.flops = self.tier.flops.report().to_dict()
            rep.timings = {k: round(v, 6) for k, v in self.tier.timings.items()}
        return rep

    def run(self, eval_every: int = 1, max_steps: int | None = None) -> TrainResult:
        reports = []
        epoch_losses: list[float] = []
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.store.step + max_steps)
        try:
            while self.store.step < stop:
                info = self.step_once()
                epoch_losses.append(info.loss)
                if self.store.step % self.steps_per_epoch == 0:
                    epoch = self.store.step // self.steps_per_epoch
                    last = self.store.step == self.total_steps
                    if eval_every and (epoch % eval_every == 0 or last):
                        em = self.evaluate()
                        reports.append(self.report(epoch, em, epoch_losses))
                        log.info("epoch %d loss %.4f em %.4f", epoch, reports[-1].train_loss, em)
                    epoch_losses = []
        finally:
            if self.tier is not None:
                self.tier.close()
        return TrainResult(self.store, reports, self.losses, self.meter, self.model, self.tier)


def layer_beta_stats(meter: CommMeter, config: ToyModelConfig, schedule: TrainSchedule, mode: str) -> list[dict]:
    """Mean BetaStats per layer over every metered forward so far."""
    out = []
    tokens = schedule.batch_size * schedule.seq_len
    for i in range(config.L):
        sizes = [u for st in meter.steps for u in st["layers"][i]["union_sizes"]]
        if not sizes:
            out.append({})
            continue
        stats = [measure_beta(np.arange(s), schedule.batch_size, schedule.seq_len, config.K_eff, config.r)
                 for s in sizes]
        out.append({k: float(np.mean([getattr(s, k) for s in stats]))
                    for k in ("union_size", "beta_k", "dedup_ratio", "activated_fraction")})
    return out


def train(config: ToyModelConfig, dataset: FactDataset, schedule: TrainSchedule,
          tier_mode: str = "meft", pipeline: bool = False, eval_every: int = 1,
          eval_dataset: FactDataset | None = None) -> TrainResult:
    return Trainer(config, dataset, schedule, tier_mode, pipeline, eval_dataset=eval_dataset).run(eval_every)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def greedy_decode(model: ToyModel, store: HostStore, ds: FactDataset, sparse: bool = True,
                  B: int = 2, l: int = 32) -> np.ndarray:
    """Greedy object tokens for every fact, shape ``(len(ds), object_len)``.

    Facts are packed in the training geometry; each decoding step only lets
    already-known tokens take part in selection.
    """
    fpr = facts_per_row(ds, l)
    per_chunk = B * fpr
    n_chunks = -(-len(ds) // per_chunk)
    ids = np.resize(np.arange(len(ds)), n_chunks * per_chunk)
    batch = pack(ds, ids, n_chunks * B, l)
    p, o = ds.prompt_len, ds.object_len
    real = batch.segments >= 0
    tokens = batch.tokens.copy()
    tokens[real & (batch.positions >= p)] = 0
    batch.tokens = tokens
    path = EvalPath(store, model, sparse, B * l)
    preds = np.zeros((n_chunks * B, fpr, o), dtype=np.int64)
    for j in range(o):
        valid = real & (batch.positions <= p - 1 + j)
        logits, _ = model.forward(batch, path, valid.reshape(-1))
        logits = logits.reshape(n_chunks * B, l, -1)
        at = real & (batch.positions == p - 1 + j)
        step_pred = logits[at].argmax(axis=-1)
        rows, cols = np.nonzero(at)
        preds[rows, batch.segments[rows, cols], j] = step_pred
        if j + 1 < o:
            tokens[rows, cols + 1] = step_pred
    return preds.reshape(-1, o)[: len(ds)]


def eval_em(model: ToyModel, store: HostStore, ds: FactDataset, sparse: bool = True,
            B: int = 2, l: int = 32) -> float:
    """Exact-match rate of greedy decoding over the dataset's facts."""
    preds = greedy_decode(model, store, ds, sparse, B, l)
    return float(np.mean(np.all(preds == ds.objects, axis=1)))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    axis: str
    value: int
    em: float
    result: TrainResult | None = None
    error: str | None = None


def experts_for(r: int, expert_size: int) -> int:
    """Expert count keeping the expert size fixed (one expert if r is smaller)."""
    return max(1, r // expert_size) if r % max(1, r // expert_size) == 0 else 1


def sweep_kv_pairs(config, ds, schedule, r_values, expert_size: int = 32, **kw) -> list[SweepPoint]:
    pts = []
    for r in r_values:
        cfg = config.replace(r=r, N=experts_for(r, expert_size))
        res = train(cfg, ds, schedule, kw.get("tier_mode", "meft"), eval_every=kw.get("eval_every", 0))
        pts.append(SweepPoint("kv_pairs", r, final_em(res, schedule, ds), res))
    return pts


def final_em(res: TrainResult, schedule: TrainSchedule, ds: FactDataset) -> float:
    if res.reports and res.reports[-1].step == res.store.step:
        return res.reports[-1].em
    mode_sparse = res.tier is not None
    return eval_em(res.model, res.store, ds, mode_sparse, schedule.batch_size, schedule.seq_len)


def sweep_k(config, ds, schedule, K_values, **kw) -> list[SweepPoint]:
    """One run per K; K >= r is the unpruned dense ceiling."""
    pts = []
    for K in K_values:
        if K >= config.r:
            res = train(config.replace(K=config.r), ds, schedule, "dense", eval_every=kw.get("eval_every", 0))
        else:
            res = train(config.replace(K=K), ds, schedule, "meft", eval_every=kw.get("eval_every", 0))
        pts.append(SweepPoint("K", K, final_em(res, schedule, ds), res))
    return pts


def sweep_experts(config, ds, schedule, N_values, **kw) -> list[SweepPoint]:
    pts = []
    for N in N_values:
        res = train(config.replace(N=N), ds, schedule, "meft", eval_every=kw.get("eval_every", 0))
        pts.append(SweepPoint("experts", N, final_em(res, schedule, ds), res))
    return pts


def batch_unions(model: ToyModel, store: HostStore, batch: PackedBatch) -> list[np.ndarray]:
    """Per-layer union S for one packed batch, without training."""
    c = model.config
    tier = MemTier(store, model.partition, "meft", meter=None)
    path = TierPath(tier, c.kk_eff, c.K_eff)
    model.forward(batch, path)
    return [tier.working[i].S for i in range(c.L)]


def sweep_batchsize(config: ToyModelConfig, ds: FactDataset, B_values, seeds, l: int = 32,
                    store: HostStore | None = None) -> dict[int, float]:
    """Mean activated fraction per batch size over seeds.

    For each seed one shuffled row order is drawn and batch size B takes its
    first B rows, so every seed compares nested batches.
    """
    fpr = facts_per_row(ds, l)
    bmax = max(B_values)
    fractions = {B: [] for B in B_values}
    for seed in seeds:
        cfg = config.replace(seed=seed)
        model = ToyModel(cfg)
        st = store if store is not None else model.init_store()
        order = make_rng(seed).permutation(len(ds))
        ids = np.resize(order, bmax * fpr)
        for B in B_values:
            batch = pack(ds, ids[: B * fpr], B, l)
            unions = batch_unions(model, st, batch)
            fractions[B].append(np.mean([u.size / cfg.r for u in unions]))
    return {B: float(np.mean(v)) for B, v in fractions.items()}
