from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlm_distill.errors import IngestionError, LengthError
from cmlm_distill.text import (BOS, CLS, EOS, MASK, PAD, RESERVED, SEP, UNK, SentencePair, Vocab,
                               WhitespaceTokenizer, build_vocab, corpus_hash, encode_corpus, make_batches,
                               read_parallel, write_parallel)

from conftest import random_pairs


def test_reserved_ids_are_stable():
    assert (PAD, BOS, EOS, MASK, CLS, SEP, UNK) == tuple(range(7))
    assert len(set(RESERVED)) == 7


class TestVocab:
    def test_frequency_order(self):
        v = build_vocab(["a a b".split()], max_size=10)
        assert v.id("a") < v.id("b")
        assert v.id("a") == len(RESERVED)

    def test_min_freq_maps_rare_words_to_unk(self):
        v = build_vocab(["a a b".split()], min_freq=2)
        assert v.encode(["a", "b"]) == [v.id("a"), UNK]

    def test_ties_are_lexicographic(self):
        v = build_vocab([["z", "y", "x"]])
        assert v.tokens == ["x", "y", "z"]

    def test_empty_corpus(self):
        with pytest.raises(IngestionError):
            build_vocab([])

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(["the cat sat on the mat".split()])
        v.save(tmp_path / "vocab.txt")
        loaded = Vocab.load(tmp_path / "vocab.txt")
        assert loaded == v and loaded.hash() == v.hash()

    def test_decode_stops_at_eos(self):
        v = build_vocab([["a", "b"]])
        assert v.decode([BOS, v.id("a"), EOS, v.id("b")]) == ["a"]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.text("abcdefgh", min_size=1, max_size=4), min_size=1, max_size=8),
                    min_size=1, max_size=6))
    def test_encode_decode_round_trip(self, corpus):
        v = build_vocab(corpus)
        for sent in corpus:
            assert v.decode(v.encode(sent)) == sent


class TestTokenizer:
    def test_char_fallback_round_trip(self):
        tok = WhitespaceTokenizer(Vocab(["the", "c", "##a", "##t"]), char_fallback=True)
        pieces = tok.tokenize("the cat")
        assert pieces == ["the", "c", "##a", "##t"]
        assert tok.detokenize(pieces) == "the cat"

    def test_plain_whitespace(self):
        assert WhitespaceTokenizer().tokenize("  a  b\tc ") == ["a", "b", "c"]


class TestCorpus:
    def test_reserved_id_in_payload_is_rejected(self):
        with pytest.raises(IngestionError):
            SentencePair((7, MASK), (8,), 0).validate(10)

    def test_unk_is_allowed(self):
        SentencePair((7, UNK), (8,), 0).validate(10)

    def test_length_limits(self):
        with pytest.raises(LengthError):
            SentencePair((), (8,), 0).validate(10)
        with pytest.raises(LengthError):
            SentencePair((7,) * 11, (8,), 0).validate(10)

    def test_unknown_words_fall_back_to_unk(self):
        v = build_vocab([["a"]])
        pairs = encode_corpus(["a zzz"], ["a"], v)
        assert pairs[0].source == (v.id("a"), UNK)

    def test_parallel_files(self, tmp_path):
        write_parallel(tmp_path / "train", ["a b", "c"], ["b a", "c"])
        assert read_parallel(tmp_path / "train") == (["a b", "c"], ["b a", "c"])

    def test_misaligned_files(self, tmp_path):
        (tmp_path / "x.src").write_text("a\nb\n")
        (tmp_path / "x.tgt").write_text("a\n")
        with pytest.raises(IngestionError, match="2 source lines but 1"):
            read_parallel(tmp_path / "x")

    def test_corpus_hash_sensitive_to_content(self):
        a = [SentencePair((7,), (8,), 0)]
        b = [SentencePair((7,), (9,), 0)]
        assert corpus_hash(a) != corpus_hash(b)


class TestBatching:
    def test_exact_fit(self):
        pairs = [SentencePair((7,), (8,) * n, i) for i, n in enumerate([3, 3, 4])]
        batches = make_batches(pairs, 10, seed=0)
        assert len(batches) == 1
        assert batches[0].token_count == 10

    def test_partition_and_budget(self, rng):
        pairs = random_pairs(1000, rng, max_len=20)
        batches = make_batches(pairs, 64, seed=3)
        ids = Counter(int(i) for b in batches for i in b.pair_ids)
        assert ids == Counter(p.pair_id for p in pairs)
        assert all(b.token_count <= 64 for b in batches)

    def test_padding_mask_marks_pad(self, rng):
        for b in make_batches(random_pairs(200, rng), 50, seed=1):
            assert np.array_equal(b.target_pad, b.target == PAD)
            assert np.array_equal(b.source_pad, b.source == PAD)

    def test_deterministic(self, rng):
        pairs = random_pairs(300, rng)
        a = make_batches(pairs, 40, seed=7)
        b = make_batches(pairs, 40, seed=7)
        assert [x.pair_ids.tolist() for x in a] == [x.pair_ids.tolist() for x in b]
        c = make_batches(pairs, 40, seed=8)
        assert [x.pair_ids.tolist() for x in a] != [x.pair_ids.tolist() for x in c]

    def test_oversized_pair_is_named(self):
        with pytest.raises(LengthError, match="pair 5"):
            make_batches([SentencePair((7,), (8,) * 12, 5)], 10, seed=0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 15), min_size=1, max_size=60), st.integers(15, 80), st.integers(0, 10 ** 6))
    def test_batches_are_a_permutation(self, lengths, budget, seed):
        pairs = [SentencePair((7,), (8,) * n, i) for i, n in enumerate(lengths)]
        batches = make_batches(pairs, budget, seed)
        assert sorted(int(i) for b in batches for i in b.pair_ids) == list(range(len(lengths)))
        assert all(b.token_count <= budget for b in batches)
