import itertools

import numpy as np
import pytest

from cmlm_distill.decoding import (beam_search, beam_search_hypotheses, greedy_decode, length_penalty,
                                   translate_corpus)
from cmlm_distill.tensor import no_grad
from cmlm_distill.text import BOS, EOS
from cmlm_distill.transformer import ModelConfig, build_student

ORACLE = ModelConfig(layers=2, d_model=8, heads=2, d_ff=16, dropout=0.0, vocab_size=6, max_len=8)
ALLOWED = (3, 4, 5)


class TestLengthPenalty:
    def test_unit_length(self):
        for p in (0.0, 0.6, 1.0, 2.0):
            assert length_penalty(1, p) == 1.0

    def test_zero_exponent(self):
        assert all(length_penalty(n, 0.0) == 1.0 for n in range(1, 30))

    def test_closed_form(self):
        assert length_penalty(19, 0.6) == pytest.approx(2.2974, abs=1e-4)
        assert length_penalty(19, 0.6) == pytest.approx(4 ** 0.6, abs=1e-12)


def random_model(seed, scale=3.0):
    model = build_student(ORACLE, seed).eval()
    model.embed.weight.data *= scale
    return model


def sequence_logprob(model, source, seq):
    with no_grad():
        logits = model(np.array([source]), np.array([[BOS, *seq[:-1]]])).data[0]
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return float(sum(logp[i, t] for i, t in enumerate(seq)))


def brute_force(model, source, max_len, p):
    best = []
    for n in range(max_len):
        for body in itertools.product(ALLOWED, repeat=n):
            seq = (*body, EOS)
            best.append((sequence_logprob(model, source, seq) / length_penalty(len(seq), p), body))
    best.sort(key=lambda x: -x[0])
    return best


def test_exhaustive_beam_matches_brute_force():
    checked = 0
    for seed in range(120):
        model = random_model(seed)
        source = list(np.random.default_rng(seed).integers(3, 6, size=3))
        ranked = brute_force(model, source, 4, 0.6)
        hyps = beam_search_hypotheses(model, source, beam=10_000, p=0.6, max_len=4)
        assert hyps[0].finished
        assert hyps[0].score(0.6) == pytest.approx(ranked[0][0], abs=1e-9)
        if ranked[0][0] - ranked[1][0] > 1e-9:
            assert tuple(hyps[0].output) == ranked[0][1]
        checked += 1
    assert checked >= 100


def test_narrow_beams_never_beat_exhaustive():
    for seed in range(30):
        model = random_model(seed)
        source = [3, 4, 5, 4]
        best = beam_search_hypotheses(model, source, beam=10_000, p=0.6, max_len=4)[0].score(0.6)
        for b in (1, 2, 3, 4):
            top = beam_search_hypotheses(model, source, beam=b, p=0.6, max_len=4)[0]
            if top.finished:
                assert top.score(0.6) <= best + 1e-12


def test_beam_one_is_greedy():
    for seed in range(20):
        model = random_model(seed, scale=1.0)
        source = list(np.random.default_rng(seed).integers(3, 6, size=4))
        assert beam_search(model, source, beam=1, max_len=6) == greedy_decode(model, [source], [6])[0]


def test_batched_greedy_matches_single(rng):
    model = random_model(3)
    sources = [list(rng.integers(3, 6, size=n)) for n in (2, 5, 3, 4)]
    batched = greedy_decode(model, sources, [5] * 4)
    for s, out in zip(sources, batched):
        assert greedy_decode(model, [s], [5])[0] == out


def test_length_is_bounded_and_fallback_is_unfinished():
    model = random_model(1)
    hyps = beam_search_hypotheses(model, [3, 4], beam=3, max_len=3, banned=(0, 1, EOS))
    assert not hyps[0].finished
    assert len(hyps[0].output) == 3


def test_banned_ids_never_appear(rng):
    model = random_model(2)
    for _ in range(10):
        out = beam_search(model, list(rng.integers(3, 6, size=3)), beam=4, max_len=6)
        assert not set(out) & {0, 1, EOS}


def test_copy_task():
    from cmlm_distill.text import SentencePair
    from cmlm_distill.trainer import TrainConfig, train_student

    rng = np.random.default_rng(0)
    pairs = []
    for i in range(600):
        seq = tuple(int(x) for x in rng.integers(7, 15, size=rng.integers(2, 7)))
        pairs.append(SentencePair(seq, seq, i))
    cfg = ModelConfig(layers=1, d_model=32, heads=4, d_ff=64, dropout=0.0, vocab_size=15, max_len=16,
                      dtype="float32")
    res = train_student(pairs[:560], pairs[560:], cfg,
                        TrainConfig(alpha=0.0, lr=1.0, warmup_steps=100, total_steps=700, token_budget=200,
                                    eval_every=350, lsr_epsilon=0.0))
    sources = [list(p.source) for p in pairs[560:]]
    assert translate_corpus(res.model, sources, beam=4) == sources
