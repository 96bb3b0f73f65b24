"""Teacher soft targets, computed once for the whole training set.

Each pair is replicated R times; replica ``r`` masks the target positions
``t`` with ``t % R == r``, so one pass over the replicas predicts every target
token exactly once, each from a context with roughly 1/R of Y hidden.
The teacher distribution is softened with a temperature, truncated to its
top-K entries and renormalised.

Store file layout::

    {"K": ..., "T": ..., ...}\\n            one line of JSON header
    (pair_id u32, t u16, K x (id u32, prob f32))*   little-endian, sorted
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, StoreCoverageError
from .teacher import MaskedExample, mask_positions, predict_masked
from .text import SentencePair

STORE_VERSION = 1
DEFAULT_K = 8
DEFAULT_REPLICAS = 7


def circular_replicas(pair: SentencePair, replicas: int = DEFAULT_REPLICAS) -> list[MaskedExample]:
    """All ``replicas`` copies of ``pair``; copy r masks target positions congruent to r."""
    n = len(pair.target)
    return [mask_positions(pair, range(r, n, replicas)) for r in range(replicas)]


def extract_topk(logits: np.ndarray, k: int = DEFAULT_K, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Top-k ids and renormalised probabilities of ``softmax(logits / temperature)``.

    Ids come out in non-increasing probability order; equal logits are
    ordered by lower token id.  Ranking uses the raw logits, so the kept set
    and its order do not depend on the temperature even where dividing by a
    large temperature would round two nearby logits to the same probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not 1 <= k <= logits.shape[-1]:
        raise ConfigError(f"K={k} must be in [1, vocab size {logits.shape[-1]}]")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    kept = np.take_along_axis(p, order, axis=-1)
    return order, kept / kept.sum(axis=-1, keepdims=True)


def record_dtype(k: int) -> np.dtype:
    entry = np.dtype([("id", "<u4"), ("prob", "<f4")])
    return np.dtype([("pair_id", "<u4"), ("t", "<u2"), ("entries", entry, (k,))])


@dataclass
class SoftLabelRecord:
    pair_id: int
    t: int
    topk_ids: np.ndarray
    topk_probs: np.ndarray


class SoftLabelStore:
    """Immutable collection of records indexed by (pair_id, t)."""

    def __init__(self, header: dict, records: np.ndarray):
        self.header = dict(header)
        self.records = records
        self.k = int(header["K"])
        self._index: dict[int, tuple[int, int]] = {}
        if len(records):
            ids = records["pair_id"]
            starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
            ends = np.r_[starts[1:], len(ids)]
            for s, e in zip(starts, ends):
                self._index[int(ids[s])] = (int(s), int(e))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def temperature(self) -> float:
        return float(self.header["T"])

    def pair_ids(self) -> list[int]:
        return list(self._index)

    def record(self, pair_id: int, t: int) -> SoftLabelRecord:
        ids, probs = self.for_pair(pair_id, t + 1)
        return SoftLabelRecord(pair_id, t, ids[t], probs[t])

    def for_pair(self, pair_id: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(ids, probs) arrays of shape (n, K) for target positions 0..n-1."""
        span = self._index.get(int(pair_id))
        if span is None:
            raise StoreCoverageError(f"no soft labels for (pair_id={pair_id}, t=0)")
        rows = self.records[span[0]:span[1]]
        if len(rows) < n or not np.array_equal(rows["t"][:n], np.arange(n)):
            missing = next(t for t in range(n) if t >= len(rows) or rows["t"][t] != t)
            raise StoreCoverageError(f"no soft labels for (pair_id={pair_id}, t={missing})")
        e = rows["entries"][:n]
        return e["id"].astype(np.int64), e["prob"].astype(np.float64)

    def validate(self, **expected: str) -> None:
        """Raise ``IntegrityError`` unless each named header field equals the expected value."""
        bad = {k: (self.header.get(k), v) for k, v in expected.items() if self.header.get(k) != v}
        if bad:
            desc = ", ".join(f"{k}: store={a!r} expected={b!r}" for k, (a, b) in sorted(bad.items()))
            raise IntegrityError(f"soft-label store does not match its inputs ({desc})")

    def save(self, path: str | Path) -> None:
        tmp = Path(f"{path}.tmp")
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(self.header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(self.records.tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> SoftLabelStore:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            if header.get("version") != STORE_VERSION:
                raise IntegrityError(f"{path}: store version {header.get('version')} != {STORE_VERSION}")
            body = fh.read()
        dt = record_dtype(int(header["K"]))
        if len(body) % dt.itemsize:
            raise IntegrityError(f"{path}: body is not a whole number of records")
        return cls(header, np.frombuffer(body, dtype=dt))


def make_header(k: int, temperature: float, vocab_hash: str, teacher_hash: str, corpus_hash: str,
                pair_count: int) -> dict:
    return {"version": STORE_VERSION, "K": int(k), "T": float(temperature), "vocab_hash": vocab_hash,
            "teacher_hash": teacher_hash, "corpus_hash": corpus_hash, "pair_count": int(pair_count)}


def merge_shards(shards: Iterable[SoftLabelStore]) -> SoftLabelStore:
    """Concatenate stores computed over disjoint pair subsets, ordered by pair_id.

    All headers must agree on everything except ``pair_count``.
    """
    shards = list(shards)
    if not shards:
        raise ValueError("nothing to merge")
    ref = {k: v for k, v in shards[0].header.items() if k != "pair_count"}
    for s in shards[1:]:
        other = {k: v for k, v in s.header.items() if k != "pair_count"}
        if other != ref:
            diff = sorted(k for k in ref.keys() | other.keys() if ref.get(k) != other.get(k))
            raise IntegrityError(f"cannot merge soft-label shards with different headers: {diff}")
    records = np.concatenate([s.records for s in shards])
    order = np.lexsort((records["t"], records["pair_id"]))
    records = records[order]
    if len(records) > 1:
        keys = records["pair_id"].astype(np.int64) * 65536 + records["t"]
        if (np.diff(keys) == 0).any():
            raise IntegrityError("soft-label shards overlap")
    header = dict(shards[0].header, pair_count=sum(int(s.header["pair_count"]) for s in shards))
    return SoftLabelStore(header, records)


Predictor = Callable[[Sequence[MaskedExample]], list[np.ndarray]]


@dataclass
class PrecomputeStats:
    forward_passes: int
    records: int


def precompute(pairs: Sequence[SentencePair], teacher, k: int = DEFAULT_K, temperature: float = 1.0,
               out_path: str | Path | None = None, *, vocab_hash: str = "", teacher_hash: str = "",
               corpus_hash: str = "", replicas: int = DEFAULT_REPLICAS,
               batch_size: int = 64) -> tuple[SoftLabelStore, PrecomputeStats]:
    """Run the teacher over the circular replicas of every pair and collect top-k records.

    ``teacher`` is either a :class:`~cmlm_distill.transformer.Teacher` or a
    callable mapping a list of masked examples to per-example logits at their
    masked positions.  Replicas with nothing masked are skipped.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    predict: Predictor
    if callable(teacher) and not hasattr(teacher, "named_parameters"):
        predict = teacher
    else:
        teacher.eval()
        predict = lambda exs: predict_masked(teacher, exs)  # noqa: E731

    dt = record_dtype(k)
    jobs = [ex for p in sorted(pairs, key=lambda p: p.pair_id) for ex in circular_replicas(p, replicas)
            if len(ex.masked_positions)]
    total = sum(len(p.target) for p in pairs)
    records = np.zeros(total, dtype=dt)
    row = 0
    for i in range(0, len(jobs), batch_size):
        chunk = jobs[i:i + batch_size]
        for ex, logits in zip(chunk, predict(chunk)):
            ids, probs = extract_topk(logits, k, temperature)
            m = len(ex.masked_positions)
            sl = records[row:row + m]
            sl["pair_id"] = ex.pair_id
            sl["t"] = ex.masked_positions
            sl["entries"]["id"] = ids
            sl["entries"]["prob"] = probs
            row += m
    records = records[np.lexsort((records["t"], records["pair_id"]))]
    header = make_header(k, temperature, vocab_hash, teacher_hash, corpus_hash, len(pairs))
    store = SoftLabelStore(header, records)
    if out_path is not None:
        store.save(out_path)
    return store, PrecomputeStats(forward_passes=len(jobs), records=len(records))
