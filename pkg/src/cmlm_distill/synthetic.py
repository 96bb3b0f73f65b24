"""Synthetic parallel corpora for desk-scale experiments.

``reversal``: the target is the source reversed, nothing else.  Every masked
target token is recoverable from the source, so a working teacher reaches
near-perfect masked accuracy.

``noisy_reversal``: the same task, but words come in pairs of near-synonyms
and each target token is swapped for its partner with probability ``noise``.
The best prediction at every position is a two-point distribution, which is
what a good teacher supplies as soft labels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .text import RESERVED


def word_types(n: int) -> list[str]:
    return [f"w{i:02d}" for i in range(n)]


def partner(i: int, n: int) -> int:
    """Index of the near-synonym of word ``i`` (the odd last word is its own partner)."""
    j = i ^ 1
    return j if j < n else i


@dataclass(frozen=True)
class CorpusSpec:
    kind: str = "noisy_reversal"
    pairs: int = 5000
    words: int = 53
    min_len: int = 3
    max_len: int = 14
    noise: float = 0.15
    dev_size: int = 400
    test_size: int = 400

    @classmethod
    def toy_reversal(cls, pairs: int = 3000) -> CorpusSpec:
        """Reversal over 13 word types, i.e. 20 vocabulary entries with the reserved ones."""
        held_out = min(200, pairs // 10)
        return cls(kind="reversal", pairs=pairs, words=20 - len(RESERVED), min_len=3, max_len=10, noise=0.0,
                   dev_size=held_out, test_size=held_out)


def generate(spec: CorpusSpec, seed: int = 0) -> tuple[list[str], list[str]]:
    """``spec.pairs`` whitespace-joined (source, target) lines."""
    if spec.kind not in ("reversal", "noisy_reversal"):
        raise ValueError(f"unknown corpus kind {spec.kind!r}")
    rng = rngmod.stream(seed, "data")
    words = word_types(spec.words)
    swap = np.array([partner(i, spec.words) for i in range(spec.words)])
    src_lines, tgt_lines = [], []
    for _ in range(spec.pairs):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(0, spec.words, size=n)
        tgt = src[::-1].copy()
        if spec.kind == "noisy_reversal" and spec.noise > 0:
            flip = rng.random(n) < spec.noise
            tgt[flip] = swap[tgt[flip]]
        src_lines.append(" ".join(words[i] for i in src))
        tgt_lines.append(" ".join(words[i] for i in tgt))
    return src_lines, tgt_lines


def split(spec: CorpusSpec, seed: int = 0) -> dict[str, tuple[list[str], list[str]]]:
    """Train/dev/test line lists; dev and test are the last ``dev_size + test_size`` pairs."""
    src, tgt = generate(spec, seed)
    a = spec.pairs - spec.dev_size - spec.test_size
    b = a + spec.dev_size
    if a < 1:
        raise ValueError("dev and test splits leave no training pairs")
    return {"train": (src[:a], tgt[:a]), "dev": (src[a:b], tgt[a:b]), "test": (src[b:], tgt[b:])}
