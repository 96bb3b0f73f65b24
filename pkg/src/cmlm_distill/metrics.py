"""Corpus BLEU, ROUGE F1 and length-bucketed BLEU."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .errors import MetricError

Tokens = Sequence[Hashable]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(hyps, refs) -> None:
    if len(hyps) != len(refs):
        raise MetricError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise MetricError("empty hypothesis set")


def bleu_stats(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4):
    """Corpus totals: (matches per order, hyp n-grams per order, ref n-grams per order, hyp len, ref len)."""
    match = [0] * max_n
    total = [0] * max_n
    ref_total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += sum(hc.values())
            ref_total[n - 1] += sum(rc.values())
    return match, total, ref_total, hyp_len, ref_len


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU in [0, 100] with the multi-bleu brevity penalty.

    An order for which neither hypotheses nor references contain a single
    n-gram (every sentence shorter than n) carries no evidence and is left
    out of the geometric mean; any other zero precision makes BLEU zero.
    """
    _check(hyps, refs)
    match, total, ref_total, c, r = bleu_stats(hyps, refs, max_n)
    if c == 0:
        return 0.0
    logs = []
    for m, t, rt in zip(match, total, ref_total):
        if t == 0 and rt == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def sentence_bleu(hyp: Tokens, ref: Tokens, max_n: int = 4) -> float:
    """Add-one smoothed sentence BLEU (orders >= 2 smoothed), for per-example reporting."""
    match, total, _, c, r = bleu_stats([hyp], [ref], max_n)
    if c == 0:
        return 0.0
    logs = []
    for n, (m, t) in enumerate(zip(match, total), start=1):
        if n == 1:
            if m == 0:
                return 0.0
            logs.append(math.log(m / t))
        else:
            logs.append(math.log((m + 1) / (t + 1)))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / max_n)


def _f1(overlap: int, n_hyp: int, n_ref: int) -> float:
    if n_hyp == 0 and n_ref == 0:
        return 1.0
    if overlap == 0:
        return 0.0
    p, r = overlap / n_hyp, overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_f1(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> tuple[float, float, float]:
    """Macro-averaged ROUGE-1, ROUGE-2 and ROUGE-L F1, each scaled to [0, 100]."""
    _check(hyps, refs)
    r1 = r2 = rl = 0.0
    for h, r in zip(hyps, refs):
        for n, acc in ((1, "r1"), (2, "r2")):
            hc, rc = ngrams(h, n), ngrams(r, n)
            f = _f1(sum((hc & rc).values()), sum(hc.values()), sum(rc.values()))
            if acc == "r1":
                r1 += f
            else:
                r2 += f
        rl += _f1(lcs_length(h, r), len(h), len(r))
    k = len(hyps)
    return 100.0 * r1 / k, 100.0 * r2 / k, 100.0 * rl / k


@dataclass
class LengthBucket:
    lo: int
    hi: int
    count: int
    bleu: float


def bleu_by_length(hyps: Sequence[Tokens], refs: Sequence[Tokens], bucket_width: int = 10,
                   max_n: int = 4) -> list[LengthBucket]:
    """Corpus BLEU per reference-length bucket ``[k*w + 1, (k+1)*w]``; empty buckets are omitted.

    Zero-length references go into the first bucket.
    """
    _check(hyps, refs)
    if bucket_width < 1:
        raise MetricError(f"bucket_width must be positive, got {bucket_width}")
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(refs):
        groups.setdefault(max(len(r) - 1, 0) // bucket_width, []).append(i)
    out = []
    for k in sorted(groups):
        idx = groups[k]
        out.append(LengthBucket(k * bucket_width + 1, (k + 1) * bucket_width, len(idx),
                                corpus_bleu([hyps[i] for i in idx], [refs[i] for i in idx], max_n)))
    return out
