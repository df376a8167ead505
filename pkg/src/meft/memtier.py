"""Two-tier parameter exchange: a host store holding every adapter parameter
and its optimizer state, a per-step device working set holding only gathered
slices, and an exact element-count meter for the traffic between them.
"""

from __future__ import annotations

import contextlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .adapter import AdapterWeights, SelectionSet
from .experts import ExpertPartition, FlopCounter
from .numerics import ShapeError

MAGIC = "MEFT1"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# host store
# ---------------------------------------------------------------------------


@dataclass
class LayerState:
    W_A: np.ndarray
    W_B: np.ndarray
    W_g: np.ndarray
    m_A: np.ndarray
    v_A: np.ndarray
    t_A: np.ndarray
    m_B: np.ndarray
    v_B: np.ndarray
    t_B: np.ndarray
    m_g: np.ndarray | None = None
    v_g: np.ndarray | None = None
    t_g: np.ndarray | None = None
    # staging buffers for gradients arriving from the device
    g_A: np.ndarray = field(init=False, repr=False)
    g_B: np.ndarray = field(init=False, repr=False)
    g_g: np.ndarray | None = field(init=False, repr=False)
    staged: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # key-side tensors are column-major so gathering key columns is contiguous
        for name in ("W_A", "m_A", "v_A", "t_A"):
            setattr(self, name, np.asfortranarray(getattr(self, name)))
        self.g_A = np.zeros_like(self.W_A)
        self.g_B = np.zeros_like(self.W_B)
        self.g_g = np.zeros_like(self.W_g) if self.m_g is not None else None
        self.staged = np.zeros(self.W_A.shape[1], dtype=bool)

    def clear_staging(self):
        S = np.flatnonzero(self.staged)
        self.g_A[:, S] = 0.0
        self.g_B[S] = 0.0
        if self.g_g is not None:
            self.g_g[...] = 0.0
        self.staged[:] = False

    @property
    def adapter(self) -> AdapterWeights:
        return AdapterWeights(self.W_A, self.W_B)

    @classmethod
    def fresh(cls, W_A, W_B, W_g, router_trainable=False) -> "LayerState":
        z = np.zeros_like
        return cls(
            W_A=W_A, W_B=W_B, W_g=W_g,
            m_A=z(W_A), v_A=z(W_A), t_A=np.zeros(W_A.shape, dtype=np.int64),
            m_B=z(W_B), v_B=z(W_B), t_B=np.zeros(W_B.shape, dtype=np.int64),
            m_g=z(W_g) if router_trainable else None,
            v_g=z(W_g) if router_trainable else None,
            t_g=np.zeros(W_g.shape, dtype=np.int64) if router_trainable else None,
        )


@dataclass
class HostStore:
    layers: list[LayerState]
    step: int = 0
    config: dict | None = None  # model config echo, carried into checkpoints

    @property
    def router_trainable(self) -> bool:
        return self.layers[0].m_g is not None

    @property
    def d(self) -> int:
        return self.layers[0].W_A.shape[0]

    @property
    def r(self) -> int:
        return self.layers[0].W_A.shape[1]

    @property
    def N(self) -> int:
        return self.layers[0].W_g.shape[0]

    def snapshot(self) -> list[dict[str, np.ndarray]]:
        """Deep copy of every persistent tensor, for before/after comparisons."""
        return [{k: a.copy() for k, a in _persistent(ls)} for ls in self.layers]


def _persistent(ls: LayerState):
    names = ["W_A", "W_B", "W_g", "m_A", "v_A", "t_A", "m_B", "v_B", "t_B"]
    if ls.m_g is not None:
        names += ["m_g", "v_g", "t_g"]
    return [(n, getattr(ls, n)) for n in names]


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


_POW_TABLES: dict[float, np.ndarray] = {}


def _one_minus_pow(beta: float, t: np.ndarray) -> np.ndarray:
    """``1 - beta**t`` elementwise, via a table of scalar powers."""
    table = _POW_TABLES.get(beta)
    top = int(t.max(initial=0))
    if table is None or table.size <= top:
        size = max(1024, 2 * top + 1)
        table = np.array([1.0 - beta**i for i in range(size)])
        _POW_TABLES[beta] = table
    return table[t]


def _adam_entries(w, m, v, t, g, hyper: AdamHyper, lr: float):
    """Adam on a slice of entries, each with its own step counter.

    ``w``, ``m`` and ``v`` are updated in place; the counters come back as a new array.
    """
    t = t + 1
    m *= hyper.beta1
    m += (1.0 - hyper.beta1) * g
    g2 = g * g
    g2 *= 1.0 - hyper.beta2
    v *= hyper.beta2
    v += g2
    denom = v / _one_minus_pow(hyper.beta2, t)
    np.sqrt(denom, out=denom)
    denom += hyper.eps
    step = m / _one_minus_pow(hyper.beta1, t)
    step *= lr
    step /= denom
    w -= step
    return w, m, v, t


def sparse_adam_update(store: HostStore, layer: int, S, hyper: AdamHyper, lr: float):
    """Lazy Adam on the key columns / value rows in S; all other entries untouched."""
    ls = store.layers[layer]
    S = np.asarray(S, dtype=np.int64)
    if S.size == 0:
        return
    if not np.all(ls.staged[S]):
        raise RuntimeError(f"layer {layer}: no staged gradients for some selected neurons")
    w, m, v, t = _adam_entries(
        ls.W_A[:, S], ls.m_A[:, S], ls.v_A[:, S], ls.t_A[:, S], ls.g_A[:, S], hyper, lr
    )
    ls.W_A[:, S], ls.m_A[:, S], ls.v_A[:, S], ls.t_A[:, S] = w, m, v, t
    w, m, v, t = _adam_entries(
        ls.W_B[S], ls.m_B[S], ls.v_B[S], ls.t_B[S], ls.g_B[S], hyper, lr
    )
    ls.W_B[S], ls.m_B[S], ls.v_B[S], ls.t_B[S] = w, m, v, t


def _router_update(ls: LayerState, hyper: AdamHyper, lr: float):
    w, m, v, t = _adam_entries(ls.W_g, ls.m_g, ls.v_g, ls.t_g, ls.g_g, hyper, lr)
    ls.W_g[...], ls.m_g[...], ls.v_g[...], ls.t_g[...] = w, m, v, t


# ---------------------------------------------------------------------------
# metering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BetaStats:
    union_size: int
    beta_k: float  # |S| / K
    dedup_ratio: float  # |S| / (tokens * K)
    activated_fraction: float  # |S| / r

    def to_dict(self) -> dict:
        return {
            "union_size": self.union_size,
            "beta_k": self.beta_k,
            "dedup_ratio": self.dedup_ratio,
            "activated_fraction": self.activated_fraction,
        }


def measure_beta(selection: SelectionSet | np.ndarray, B: int, l: int, K: int, r: int) -> BetaStats:
    union = selection.union if isinstance(selection, SelectionSet) else np.asarray(selection)
    size = int(np.unique(union).size)
    return BetaStats(
        union_size=size,
        beta_k=size / K,
        dedup_ratio=size / (B * l * K),
        activated_fraction=size / r,
    )


class CommMeter:
    """Exact element counts for host<->device traffic, per step and per layer."""

    KINDS = ("host_to_device", "device_to_host", "hidden")

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self.steps: list[dict] = []
        self.totals = {k: 0 for k in self.KINDS}
        self._lock = threading.RLock()

    def begin_step(self, step: int):
        with self._lock:
            self.steps.append(
                {
                    "step": step,
                    "layers": [
                        {**{k: 0 for k in self.KINDS}, "union_sizes": []}
                        for _ in range(self.n_layers)
                    ],
                }
            )

    def _current(self, layer: int) -> dict:
        if not self.steps:
            self.begin_step(0)
        return self.steps[-1]["layers"][layer]

    def add(self, kind: str, layer: int, count: int):
        if kind not in self.KINDS:
            raise KeyError(kind)
        if count < 0:
            raise ValueError("element counts are non-negative")
        with self._lock:
            self._current(layer)[kind] += int(count)
            self.totals[kind] += int(count)

    def note_union(self, layer: int, size: int):
        with self._lock:
            self._current(layer)["union_sizes"].append(int(size))

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def step_total(self, i: int = -1) -> int:
        return sum(sum(lay[k] for k in self.KINDS) for lay in self.steps[i]["layers"])

    def export(self) -> dict:
        return {"totals": dict(self.totals), "total": self.total, "steps": self.steps}


def push_hidden(meter: CommMeter, B: int, l: int, d: int, layer: int = 0):
    """Hidden states for one layer travel device -> host for selection."""
    meter.add("hidden", layer, B * l * d)


def predicted_cost(n_layers, d, K, B, l, beta, include_backward: bool = False):
    """Analytic traffic ``n_layers * (2*d*beta*K + B*l*d)``.

    With ``include_backward`` the gradient return flow ``n_layers*2*d*beta*K`` is
    added, which is what the meter records. Pass ``beta`` as a ``Fraction`` to
    keep the result an exact integer.
    """
    params = 2 * d * beta * K
    cost = n_layers * (params + B * l * d)
    if include_backward:
        cost += n_layers * params
    return cost


def beta_from_unions(union_sizes, K: int) -> Fraction:
    """Mean |S|/K over layers as an exact fraction."""
    union_sizes = list(union_sizes)
    return Fraction(sum(union_sizes), len(union_sizes) * K)


def brutal_offload_cost(n_layers: int, d: int, r: int, mode: str = "iteration") -> int:
    """Full-offload traffic: every adapter parameter down and every gradient up."""
    if mode not in ("iteration", "one_way"):
        raise ValueError(f"unknown mode {mode!r}")
    M = n_layers * 2 * d * r
    return 2 * M if mode == "iteration" else M


# ---------------------------------------------------------------------------
# device working set and the tier handle
# ---------------------------------------------------------------------------


@dataclass
class WorkingSet:
    layer: int
    S: np.ndarray
    W_A_K: np.ndarray
    W_B_K: np.ndarray
    cache: object = None
    selection: SelectionSet | None = None
    valid: np.ndarray | None = None


def fetch(store: HostStore, layer: int, S, meter: CommMeter | None = None, full: bool = False) -> WorkingSet:
    """Gather key columns / value rows at S for the device.

    With ``full`` the whole adapter is transferred (brutal offload) and the
    slice is cut on the device; the metered count changes, the slice does not.
    """
    ls = store.layers[layer]
    S = np.asarray(S, dtype=np.int64).reshape(-1)
    r = ls.W_A.shape[1]
    if S.size and (S.min() < 0 or S.max() >= r):
        bad = S[(S < 0) | (S >= r)][0]
        raise IndexError(f"neuron index {int(bad)} out of range for r={r}")
    if S.size and np.any(np.diff(S) <= 0):
        raise ValueError("selection indices must be sorted ascending without duplicates")
    d = ls.W_A.shape[0]
    if meter is not None:
        meter.add("host_to_device", layer, 2 * d * (r if full else S.size))
        meter.note_union(layer, S.size)
    return WorkingSet(layer, S, ls.W_A[:, S].copy(), ls.W_B[S].copy())


def scatter_grads(store: HostStore, layer: int, S, grad_W_A_K, grad_W_B_K,
                  meter: CommMeter | None = None, full: bool = False):
    """Send slice gradients back and accumulate them into host staging buffers."""
    ls = store.layers[layer]
    S = np.asarray(S, dtype=np.int64).reshape(-1)
    d, r = ls.W_A.shape
    if grad_W_A_K.shape != (d, S.size) or grad_W_B_K.shape != (S.size, d):
        raise ShapeError(
            f"gradient shapes {grad_W_A_K.shape}, {grad_W_B_K.shape} do not match |S|={S.size}, d={d}"
        )
    if meter is not None:
        meter.add("device_to_host", layer, 2 * d * (r if full else S.size))
    ls.g_A[:, S] += grad_W_A_K
    ls.g_B[S] += grad_W_B_K
    ls.staged[S] = True


class MemTier:
    """Handle tying a host store to its meter, timers and per-step working sets.

    ``mode`` is ``"meft"`` (sparse transfer) or ``"brutal"`` (full transfer,
    same numerics). A tier built without a meter moves nothing on the books,
    which is what evaluation uses.
    """

    def __init__(self, store: HostStore, partition: ExpertPartition, mode: str = "meft",
                 meter: CommMeter | None = None, pipeline: bool = False):
        if mode not in ("meft", "brutal"):
            raise ValueError(f"unknown tier mode {mode!r}")
        self.store = store
        self.partition = partition
        self.mode = mode
        self.meter = meter
        self.flops = FlopCounter() if meter is not None else None
        self.working: dict[int, WorkingSet] = {}
        self.timings = {k: 0.0 for k in ("selection", "fetch", "compute", "scatter", "update", "overlapped")}
        self._pipeline = False
        self._started = False
        self._pool = None
        self.set_pipeline_mode(pipeline)

    # lifecycle ---------------------------------------------------------------

    @property
    def pipeline(self) -> bool:
        return self._pipeline

    def set_pipeline_mode(self, on: bool):
        if self._started and bool(on) != self._pipeline:
            raise RuntimeError("pipeline mode cannot change once a run has started")
        self._pipeline = bool(on)

    def begin_step(self):
        self._started = True
        if self.meter is not None:
            self.meter.begin_step(self.store.step)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # timing ------------------------------------------------------------------

    @contextlib.contextmanager
    def timed(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] += time.perf_counter() - t0

    def overlap(self, select_fn, compute_fn, layer: int):
        """Run host-side selection and device-side base compute.

        In pipeline mode the two run concurrently; results are identical.
        The recorded ``overlapped`` time is max(selection, compute) when
        pipelined and their sum otherwise.
        """
        self._started = True

        def timed_call(fn):
            t0 = time.perf_counter()
            out = fn()
            return out, time.perf_counter() - t0

        if self._pipeline:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="host-select")
            fut = self._pool.submit(timed_call, select_fn)
            base, t_comp = timed_call(compute_fn)
            sel, t_sel = fut.result()
            hidden = max(t_sel, t_comp)
        else:
            sel, t_sel = timed_call(select_fn)
            base, t_comp = timed_call(compute_fn)
            hidden = t_sel + t_comp
        self.timings["selection"] += t_sel
        self.timings["compute"] += t_comp
        self.timings["overlapped"] += hidden
        return sel, base

    # transfers ---------------------------------------------------------------

    def push_hidden(self, layer: int, n_tokens: int, d: int):
        if self.meter is not None and self.mode == "meft":
            push_hidden(self.meter, n_tokens, 1, d, layer)

    def fetch(self, layer: int, S) -> WorkingSet:
        with self.timed("fetch"):
            ws = fetch(self.store, layer, S, self.meter, full=self.mode == "brutal")
        self.working[layer] = ws
        return ws

    def scatter_grads(self, layer: int, S, gA, gB):
        with self.timed("scatter"):
            scatter_grads(self.store, layer, S, gA, gB, self.meter, full=self.mode == "brutal")
        # the device copy does not outlive its backward pass
        self.working.pop(layer, None)

    def stage_router_grad(self, layer: int, grad):
        self.store.layers[layer].g_g += grad

    def apply_updates(self, hyper: AdamHyper, lr: float):
        """Optimizer step on the host for everything staged since the last step."""
        with self.timed("update"):
            for i, ls in enumerate(self.store.layers):
                S = np.flatnonzero(ls.staged)
                sparse_adam_update(self.store, i, S, hyper, lr)
                if ls.m_g is not None:
                    _router_update(ls, hyper, lr)
                ls.clear_staging()
            self.store.step += 1
        self.working.clear()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class MissingStateError(CheckpointError):
    pass


_WEIGHTS = ("W_A", "W_B", "W_g")
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _tensor_plan(store: HostStore, precision: str):
    plan = []
    for i, ls in enumerate(store.layers):
        for name, arr in _persistent(ls):
            if name in _WEIGHTS:
                dt = _DTYPES[precision]
            elif name.startswith("t_"):
                dt = "<i8"
            else:
                dt = "<f8"
            plan.append((f"layers.{i}.{name}", dt, list(arr.shape), arr))
    return plan


def save_checkpoint(store: HostStore, path, precision: str = "f32"):
    """Header line ``MEFT1 {json}`` followed by raw little-endian tensors.

    Weights use ``precision``; moments are float64 and counters int64 so the
    optimizer state survives the round trip exactly.
    """
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}")
    plan = _tensor_plan(store, precision)
    header = {
        "version": CHECKPOINT_VERSION,
        "precision": precision,
        "step": store.step,
        "n_layers": len(store.layers),
        "d": store.d,
        "r": store.r,
        "N": store.N,
        "router_trainable": store.router_trainable,
        "config": store.config,
        "tensors": [[name, dt, shape] for name, dt, shape, _ in plan],
    }
    blobs = []
    for name, dt, _, arr in plan:
        with np.errstate(over="ignore"):
            out = np.ascontiguousarray(arr, dtype=dt)
        if out.dtype.kind == "f" and not np.all(np.isfinite(out)):
            raise ValueError(f"{name} is not representable as {precision}")
        blobs.append(out.tobytes())
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {json.dumps(header, sort_keys=True, separators=(',', ':'))}\n".encode())
        for blob in blobs:
            fh.write(blob)


def _read_header(raw: bytes) -> tuple[dict, int]:
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(MAGIC.encode() + b" "):
        raise CorruptHeaderError("missing MEFT1 header line")
    try:
        header = json.loads(raw[len(MAGIC) + 1 : nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or header.get("version") != CHECKPOINT_VERSION:
        raise CorruptHeaderError(f"unsupported checkpoint version {header.get('version') if isinstance(header, dict) else None!r}")
    for key in ("precision", "step", "n_layers", "d", "r", "N", "router_trainable", "tensors"):
        if key not in header:
            raise CorruptHeaderError(f"header lacks {key!r}")
    return header, nl + 1


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.readline()
    return _read_header(raw)[0]


def load_checkpoint(path, expect: dict | None = None) -> HostStore:
    """Strict loader. ``expect`` may pin any of d, r, N, n_layers."""
    raw = Path(path).read_bytes()
    header, offset = _read_header(raw)
    for key, want in (expect or {}).items():
        if header.get(key) != want:
            raise CheckpointShapeError(f"checkpoint {key}={header.get(key)} but expected {want}")
    L, d, r, N = header["n_layers"], header["d"], header["r"], header["N"]
    shapes = {"W_A": (d, r), "W_B": (r, d), "W_g": (N, d)}
    for m in ("m", "v", "t"):
        shapes[f"{m}_A"], shapes[f"{m}_B"], shapes[f"{m}_g"] = (d, r), (r, d), (N, d)
    required = ["W_A", "W_B", "W_g", "m_A", "v_A", "t_A", "m_B", "v_B", "t_B"]
    if header["router_trainable"]:
        required += ["m_g", "v_g", "t_g"]

    entries = {}
    for item in header["tensors"]:
        try:
            name, dt, shape = item
            np.dtype(dt)
        except (TypeError, ValueError):
            raise CorruptHeaderError(f"bad tensor entry {item!r}") from None
        entries[name] = (dt, tuple(shape))
    tensors = {}
    for name, (dt, shape) in entries.items():
        size = int(np.prod(shape)) * np.dtype(dt).itemsize
        if offset + size > len(raw):
            raise TruncatedCheckpointError(f"file ends inside tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += size
    if offset != len(raw):
        raise CorruptHeaderError(f"{len(raw) - offset} trailing bytes after the last tensor")

    layers = []
    for i in range(L):
        kw = {}
        for name in required:
            key = f"layers.{i}.{name}"
            if key not in tensors:
                raise MissingStateError(f"checkpoint has no {key}; refusing to zero-fill")
            arr = tensors[key]
            if arr.shape != shapes[name]:
                raise CheckpointShapeError(f"{key} has shape {arr.shape}, expected {shapes[name]}")
            kw[name] = arr.astype(np.int64 if name.startswith("t_") else np.float64)
        layers.append(LayerState(**kw))
    return HostStore(layers=layers, step=int(header["step"]), config=header.get("config"))
