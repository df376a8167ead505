"""Synthetic knowledge-injection task: random (subject, relation) -> object facts.

Token 0 is reserved for padding; fact tokens are drawn from 1..V-1. Facts are
packed several to a row; attention never crosses a fact boundary, so a packed
row behaves like independent short sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng

PAD = 0


@dataclass
class FactDataset:
    subjects: np.ndarray  # (F, subject_len)
    relations: np.ndarray  # (F,)
    objects: np.ndarray  # (F, object_len)
    V: int
    seed: int

    def __len__(self) -> int:
        return len(self.relations)

    @property
    def subject_len(self) -> int:
        return self.subjects.shape[1]

    @property
    def object_len(self) -> int:
        return self.objects.shape[1]

    @property
    def fact_len(self) -> int:
        return self.subject_len + 1 + self.object_len

    @property
    def prompt_len(self) -> int:
        return self.subject_len + 1

    def tokens(self) -> np.ndarray:
        return np.concatenate([self.subjects, self.relations[:, None], self.objects], axis=1)

    def facts(self):
        for s, rel, o in zip(self.subjects, self.relations, self.objects):
            yield tuple(int(t) for t in s), int(rel), tuple(int(t) for t in o)

    def subset(self, idx) -> "FactDataset":
        idx = np.asarray(idx)
        return FactDataset(self.subjects[idx], self.relations[idx], self.objects[idx], self.V, self.seed)


def gen_fact_dataset(num_facts: int, V: int, object_len: int, seed: int,
                     subject_len: int = 3) -> FactDataset:
    """Uniform random facts with unique (subject, relation) keys."""
    if num_facts < 1 or object_len < 1 or subject_len < 1:
        raise ValueError("num_facts, object_len and subject_len must be >= 1")
    if V < 2:
        raise ValueError("vocabulary needs at least one non-pad token")
    distinct = (V - 1) ** (subject_len + 1)
    if num_facts > distinct:
        raise ValueError(f"{num_facts} facts exceed the {distinct} distinct subject-relation pairs")
    rng = make_rng(seed)
    keys: set[tuple[int, ...]] = set()
    rows = []
    while len(rows) < num_facts:
        key = tuple(int(t) for t in rng.integers(1, V, size=subject_len + 1))
        if key in keys:
            continue
        keys.add(key)
        rows.append(key)
    keys_arr = np.array(rows, dtype=np.int64)
    objects = rng.integers(1, V, size=(num_facts, object_len)).astype(np.int64)
    return FactDataset(keys_arr[:, :subject_len], keys_arr[:, subject_len], objects, V, seed)


def save_dataset(ds: FactDataset, path):
    """Header line ``V=<V> seed=<seed>``, then ``subject<TAB>relation<TAB>object`` per fact."""
    lines = [f"V={ds.V} seed={ds.seed}"]
    for s, rel, o in ds.facts():
        lines.append(f"{' '.join(map(str, s))}\t{rel}\t{' '.join(map(str, o))}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> FactDataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty dataset file")
    try:
        head = dict(item.split("=", 1) for item in text[0].split())
        V, seed = int(head["V"]), int(head["seed"])
    except (KeyError, ValueError):
        raise ValueError(f"{path}: malformed header {text[0]!r}") from None
    subj, rel, obj = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        subj.append([int(t) for t in parts[0].split()])
        rel.append(int(parts[1]))
        obj.append([int(t) for t in parts[2].split()])
    return FactDataset(np.array(subj, dtype=np.int64), np.array(rel, dtype=np.int64),
                       np.array(obj, dtype=np.int64), V, seed)


@dataclass
class PackedBatch:
    tokens: np.ndarray  # (B, l)
    positions: np.ndarray  # position inside the fact
    segments: np.ndarray  # fact slot per position, -1 for padding
    targets: np.ndarray  # next token at each position
    loss_mask: np.ndarray  # True where the next token is an object token
    fact_ids: np.ndarray  # (B, facts_per_row) dataset index per slot

    @property
    def B(self) -> int:
        return self.tokens.shape[0]

    @property
    def l(self) -> int:
        return self.tokens.shape[1]


def facts_per_row(ds: FactDataset, l: int) -> int:
    n = l // ds.fact_len
    if n < 1:
        raise ValueError(f"sequence length {l} is shorter than one fact ({ds.fact_len} tokens)")
    return n


def pack(ds: FactDataset, fact_ids: np.ndarray, B: int, l: int) -> PackedBatch:
    """Pack ``B * facts_per_row`` facts into B rows of length l."""
    fpr = facts_per_row(ds, l)
    fact_ids = np.asarray(fact_ids, dtype=np.int64).reshape(B, fpr)
    F, p = ds.fact_len, ds.prompt_len
    toks = ds.tokens()[fact_ids]  # (B, fpr, F)
    tokens = np.full((B, l), PAD, dtype=np.int64)
    tokens[:, : fpr * F] = toks.reshape(B, fpr * F)
    within = np.arange(F)
    positions = np.zeros((B, l), dtype=np.int64)
    positions[:, : fpr * F] = np.tile(within, fpr)
    segments = np.full((B, l), -1, dtype=np.int64)
    segments[:, : fpr * F] = np.repeat(np.arange(fpr), F)
    targets = np.full((B, l), PAD, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    mask_one = (within >= p - 1) & (within < F - 1)
    loss_mask = np.zeros((B, l), dtype=bool)
    loss_mask[:, : fpr * F] = np.tile(mask_one, fpr)
    return PackedBatch(tokens, positions, segments, targets, loss_mask, fact_ids)


def epoch_batches(ds: FactDataset, B: int, l: int, rng: np.random.Generator):
    """Shuffled packed batches covering every fact once; the last batch wraps around."""
    per_batch = B * facts_per_row(ds, l)
    order = rng.permutation(len(ds))
    n_batches = -(-len(ds) // per_batch)
    padded = np.resize(order, n_batches * per_batch)
    for i in range(n_batches):
        yield pack(ds, padded[i * per_batch : (i + 1) * per_batch], B, l)
