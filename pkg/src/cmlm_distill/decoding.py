"""Beam search with GNMT length normalisation, and batched greedy decoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, no_grad
from .text import BOS, EOS, PAD
from .transformer import Student

DEFAULT_BANNED = (PAD, BOS)


def length_penalty(length: int, p: float = 0.6) -> float:
    """``((5 + length) / 6) ** p``."""
    return ((5.0 + length) / 6.0) ** p


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float = 0.0
    finished: bool = False
    step_logprobs: list[float] = field(default_factory=list)

    @property
    def length(self) -> int:
        """Generated tokens, EOS included, BOS excluded."""
        return len(self.tokens) - 1

    def score(self, p: float) -> float:
        return self.logprob / length_penalty(self.length, p)

    @property
    def output(self) -> list[int]:
        out = self.tokens[1:]
        return out[:-1] if self.finished else out


def default_max_len(model: Student, src_len: int, a: float = 1.5, b: int = 10) -> int:
    return max(1, min(model.config.max_len - 1, int(a * src_len + b)))


def _step_logprobs(model: Student, prefixes: np.ndarray, memory: np.ndarray, src_pad: np.ndarray,
                   banned: Sequence[int]) -> np.ndarray:
    logits = model.decode(prefixes, Tensor(memory), src_pad).data[:, -1, :].astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    if banned:
        logp[:, list(banned)] = -np.inf
    return logp


def beam_search_hypotheses(model: Student, source: Sequence[int], beam: int = 4, p: float = 0.6,
                           max_len: int | None = None, banned: Sequence[int] = DEFAULT_BANNED) -> list[Hypothesis]:
    """All retired hypotheses, best penalized score first (unfinished ones only if nothing finished).

    At each step the ``beam`` best expansions of the live hypotheses are kept;
    those ending in EOS retire with score ``logprob / length_penalty``.  The
    search stops when nothing is live, at ``max_len`` generated tokens, or
    when no live hypothesis can still beat the best retired one.
    """
    model.eval()
    src = np.asarray(source, dtype=np.int64)[None, :]
    max_len = default_max_len(model, src.shape[1]) if max_len is None else max_len
    with no_grad():
        src_pad = src == PAD
        memory = model.encode(src, src_pad).data
        live = [Hypothesis([BOS])]
        finished: list[Hypothesis] = []
        best_lp = length_penalty(max_len, p)
        for step in range(1, max_len + 1):
            prefixes = np.array([h.tokens for h in live], dtype=np.int64)
            n = len(live)
            logp = _step_logprobs(model, prefixes, np.repeat(memory, n, axis=0), np.repeat(src_pad, n, axis=0), banned)
            totals = np.array([h.logprob for h in live])[:, None] + logp
            flat = totals.ravel()
            order = np.argsort(-flat, kind="stable")[:beam]
            new_live = []
            for idx in order:
                if not np.isfinite(flat[idx]):
                    break
                h, tok = divmod(int(idx), logp.shape[1])
                parent = live[h]
                child = Hypothesis(parent.tokens + [tok], float(flat[idx]), tok == EOS,
                                   parent.step_logprobs + [float(logp[h, tok])])
                (finished if child.finished else new_live).append(child)
            live = new_live
            if not live:
                break
            if finished:
                best = max(f.score(p) for f in finished)
                bound = max(h.logprob for h in live) / best_lp
                if best >= bound:
                    break
    pool = finished if finished else live
    return sorted(pool, key=lambda h: -h.score(p))


def beam_search(model: Student, source: Sequence[int], beam: int = 4, p: float = 0.6, max_len: int | None = None,
                banned: Sequence[int] = DEFAULT_BANNED) -> list[int]:
    """Best output token ids (BOS and EOS stripped)."""
    return beam_search_hypotheses(model, source, beam, p, max_len, banned)[0].output


def greedy_decode(model: Student, sources: Sequence[Sequence[int]], max_lens: Sequence[int] | None = None,
                  banned: Sequence[int] = DEFAULT_BANNED) -> list[list[int]]:
    """Argmax decoding of a batch of sources (EOS stripped)."""
    model.eval()
    b = len(sources)
    width = max(len(s) for s in sources)
    src = np.full((b, width), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
    if max_lens is None:
        max_lens = [default_max_len(model, len(s)) for s in sources]
    limit = max(max_lens)
    out = np.full((b, limit + 1), PAD, dtype=np.int64)
    out[:, 0] = BOS
    done = np.zeros(b, dtype=bool)
    with no_grad():
        src_pad = src == PAD
        memory = model.encode(src, src_pad).data
        for step in range(1, limit + 1):
            logp = _step_logprobs(model, out[:, :step], memory, src_pad, banned)
            nxt = logp.argmax(axis=-1)
            out[:, step] = np.where(done, PAD, nxt)
            done |= (nxt == EOS) | (step >= np.asarray(max_lens))
            if done.all():
                break
    results = []
    for row in out[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        results.append(toks)
    return results


def translate_corpus(model: Student, sources: Sequence[Sequence[int]], beam: int = 4, length_penalty: float = 0.6,
                     batch_size: int = 64) -> list[list[int]]:
    if beam == 1:
        order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
        results: list[list[int]] = [[] for _ in sources]
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            for j, hyp in zip(idx, greedy_decode(model, [sources[j] for j in idx])):
                results[j] = hyp
        return results
    return [beam_search(model, s, beam, length_penalty) for s in sources]
