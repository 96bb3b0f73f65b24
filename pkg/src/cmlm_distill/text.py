"""Vocabulary, tokenisation, parallel-corpus ingestion and token-count batching."""
from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import IngestionError, LengthError

RESERVED = ("<pad>", "<bos>", "<eos>", "<mask>", "<cls>", "<sep>", "<unk>")
PAD, BOS, EOS, MASK, CLS, SEP, UNK = range(len(RESERVED))
CONTINUATION = "##"


class Vocab:
    """Token/id bijection. Ids 0..6 are the reserved symbols, in ``RESERVED`` order."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._itos = list(RESERVED)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            if tok in self._stoi:
                raise IngestionError(f"duplicate vocabulary entry {tok!r}")
            self._stoi[tok] = len(self._itos)
            self._itos.append(tok)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self._itos[len(RESERVED):]

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i < len(RESERVED) and i != UNK:
                if i == EOS:
                    break
                continue
            out.append(self._itos[i])
        return out

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-sorted vocabulary over tokenised sentences.

    Ties are broken by lexicographic order.  ``max_size`` bounds the number of
    non-reserved entries; anything cut off or below ``min_freq`` encodes to UNK.
    """
    counts: Counter[str] = Counter()
    for sent in corpus:
        counts.update(sent)
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(ranked)


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...

    def detokenize(self, tokens: Sequence[str]) -> str: ...


class WhitespaceTokenizer:
    """Split on whitespace; optionally spell out unknown words character by character.

    Fallback pieces follow the WordPiece convention: the first character as is,
    the rest prefixed with ``##`` so that :meth:`detokenize` can glue them back.
    """

    def __init__(self, vocab: Vocab | None = None, char_fallback: bool = False):
        self.vocab = vocab
        self.char_fallback = char_fallback

    def _pieces(self, word: str) -> list[str]:
        return [word[0]] + [CONTINUATION + c for c in word[1:]]

    def tokenize(self, text: str) -> list[str]:
        words = text.split()
        if not self.char_fallback:
            return words
        out: list[str] = []
        for w in words:
            if self.vocab is not None and w in self.vocab:
                out.append(w)
            elif self.vocab is None:
                out.append(w)
            else:
                out.extend(self._pieces(w))
        return out

    def training_tokens(self, text: str) -> list[str]:
        """Tokens to count when building a vocabulary (words plus their pieces)."""
        words = text.split()
        if not self.char_fallback:
            return words
        out = list(words)
        for w in words:
            out.extend(self._pieces(w))
        return out

    def detokenize(self, tokens: Sequence[str]) -> str:
        words: list[str] = []
        for t in tokens:
            if t.startswith(CONTINUATION) and words and len(t) > len(CONTINUATION):
                words[-1] += t[len(CONTINUATION):]
            else:
                words.append(t)
        return " ".join(words)


@dataclass(frozen=True)
class SentencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]
    pair_id: int

    def validate(self, max_len: int) -> None:
        for name, seq in (("source", self.source), ("target", self.target)):
            if not 1 <= len(seq) <= max_len:
                raise LengthError(f"pair {self.pair_id}: {name} length {len(seq)} outside [1, {max_len}]")
            bad = [i for i in seq if i < len(RESERVED) and i != UNK]
            if bad:
                raise IngestionError(f"pair {self.pair_id}: reserved id {bad[0]} inside {name}")


def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def read_parallel(prefix: str | Path) -> tuple[list[str], list[str]]:
    """Read ``<prefix>.src`` / ``<prefix>.tgt`` aligned line files."""
    src = read_lines(f"{prefix}.src")
    tgt = read_lines(f"{prefix}.tgt")
    if len(src) != len(tgt):
        raise IngestionError(f"{prefix}: {len(src)} source lines but {len(tgt)} target lines")
    if not src:
        raise IngestionError(f"{prefix}: empty corpus")
    return src, tgt


def write_parallel(prefix: str | Path, src: Sequence[str], tgt: Sequence[str]) -> None:
    Path(f"{prefix}.src").write_text("".join(s + "\n" for s in src), encoding="utf-8")
    Path(f"{prefix}.tgt").write_text("".join(t + "\n" for t in tgt), encoding="utf-8")


def encode_corpus(src: Sequence[str], tgt: Sequence[str], vocab: Vocab, tokenizer: Tokenizer | None = None,
                  max_len: int = 256) -> list[SentencePair]:
    tokenizer = tokenizer or WhitespaceTokenizer(vocab)
    pairs = []
    for i, (s, t) in enumerate(zip(src, tgt, strict=True)):
        pair = SentencePair(tuple(vocab.encode(tokenizer.tokenize(s))), tuple(vocab.encode(tokenizer.tokenize(t))), i)
        pair.validate(max_len)
        pairs.append(pair)
    return pairs


def corpus_hash(pairs: Iterable[SentencePair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(f"{p.pair_id}|{' '.join(map(str, p.source))}|{' '.join(map(str, p.target))}\n".encode())
    return h.hexdigest()


@dataclass
class Batch:
    pair_ids: np.ndarray
    source: np.ndarray
    source_pad: np.ndarray
    target: np.ndarray
    target_pad: np.ndarray

    @property
    def token_count(self) -> int:
        """Non-pad target tokens."""
        return int((~self.target_pad).sum())

    def __len__(self) -> int:
        return len(self.pair_ids)


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    lens = np.array([len(s) for s in seqs])
    return out, np.arange(width)[None, :] >= lens[:, None]


def collate(pairs: Sequence[SentencePair]) -> Batch:
    src, src_pad = pad_sequences([p.source for p in pairs])
    tgt, tgt_pad = pad_sequences([p.target for p in pairs])
    return Batch(np.array([p.pair_id for p in pairs], dtype=np.int64), src, src_pad, tgt, tgt_pad)


def make_batches(pairs: Sequence[SentencePair], token_budget: int, seed: int | np.random.Generator,
                 bucket_width: int = 4) -> list[Batch]:
    """Group pairs of similar target length into batches of at most ``token_budget`` target tokens.

    Buckets cover target lengths ``[k*w + 1, (k+1)*w]``.  Pairs are shuffled
    inside each bucket, packed greedily, and the resulting batches shuffled,
    all from ``seed``; every pair lands in exactly one batch.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    buckets: dict[int, list[SentencePair]] = defaultdict(list)
    for p in pairs:
        n = len(p.target)
        if n > token_budget:
            raise LengthError(f"pair {p.pair_id}: target length {n} exceeds token budget {token_budget}")
        buckets[(n - 1) // bucket_width].append(p)

    groups: list[list[SentencePair]] = []
    for key in sorted(buckets):
        members = buckets[key]
        order = rng.permutation(len(members))
        current: list[SentencePair] = []
        used = 0
        for i in order:
            p = members[i]
            if used + len(p.target) > token_budget:
                groups.append(current)
                current, used = [], 0
            current.append(p)
            used += len(p.target)
        if current:
            groups.append(current)
    return [collate(groups[i]) for i in rng.permutation(len(groups))]
