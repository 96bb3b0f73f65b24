import numpy as np
import pytest

from cmlm_distill.errors import ConfigError
from cmlm_distill.optim import triangular_lr
from cmlm_distill.teacher import (TeacherTrainConfig, TeacherVariant, cmlm_loss, cmlm_mask, collate_masked,
                                  mask_count, mask_positions, masked_cross_entropy, pack)
from cmlm_distill.tensor import Tensor
from cmlm_distill.text import CLS, MASK, SEP, SentencePair
from cmlm_distill.transformer import build_teacher


def pair(m, n, pid=0):
    return SentencePair(tuple(range(7, 7 + m)), tuple(range(20, 20 + n)), pid)


class TestPacking:
    def test_layout(self):
        ids, segs, off = pack(SentencePair((7, 8), (9, 10, 11), 0))
        assert ids.tolist() == [CLS, 7, 8, SEP, 9, 10, 11, SEP]
        assert segs.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
        assert off == 4


class TestMasking:
    @pytest.mark.parametrize("n,expected", [(1, 1), (3, 1), (4, 1), (10, 2), (20, 3), (30, 5), (100, 15)])
    def test_mask_count(self, n, expected):
        assert mask_count(n) == expected

    def test_n20_masks_three_target_positions(self, rng):
        p = pair(9, 20)
        ex = cmlm_mask(p, 0.15, rng)
        assert len(ex.masked_positions) == 3
        masked = np.flatnonzero(ex.input_ids == MASK)
        assert np.all(masked >= ex.y_offset) and np.all(masked < ex.y_offset + 20)
        np.testing.assert_array_equal(ex.input_ids[1:10], p.source)

    def test_single_token_target(self, rng):
        assert len(cmlm_mask(pair(3, 1), 0.15, rng).masked_positions) == 1

    def test_labels_are_the_original_tokens(self, rng):
        p = pair(4, 12)
        ex = cmlm_mask(p, 0.15, rng)
        assert ex.labels.tolist() == [p.target[t] for t in ex.masked_positions]

    def test_per_position_frequency(self, rng):
        p = pair(5, 100)
        counts = np.zeros(100)
        for _ in range(10_000):
            counts[cmlm_mask(p, 0.15, rng).masked_positions] += 1
        freq = counts / 10_000
        assert np.all(np.abs(freq - 0.15) < 0.015)
        assert abs(freq.mean() - 0.15) < 0.01


class TestLoss:
    def test_uniform_logits_give_log_v(self):
        v = 13
        logits = Tensor(np.zeros((2, 6, v)))
        loss = masked_cross_entropy(logits, np.array([1, 4, 9]), np.array([7, 8, 9]))
        assert loss.item() == pytest.approx(np.log(v), abs=1e-12)

    def test_confident_correct_logits_give_near_zero(self):
        logits = np.zeros((1, 4, 10))
        logits[0, 2, 7] = 50.0
        loss = masked_cross_entropy(Tensor(logits), np.array([2]), np.array([7]))
        assert loss.item() < 1e-12

    def test_gradient_only_at_masked_positions(self, micro_config, rng):
        teacher = build_teacher(micro_config.replace(positional="learned"), 0)
        batch = collate_masked([mask_positions(SentencePair((7, 8, 9), (10, 7, 9, 8), 0), [1, 3])])
        logits = Tensor(teacher(batch.input_ids, batch.segment_ids).data, requires_grad=True)
        masked_cross_entropy(logits, batch.flat_positions, batch.labels).backward()
        touched = np.flatnonzero(np.abs(logits.grad[0]).sum(-1) > 0)
        assert touched.tolist() == [5 + 1, 5 + 3]

    def test_cmlm_loss_runs_on_examples(self, micro_config, rng):
        teacher = build_teacher(micro_config.replace(positional="learned", vocab_size=30), 0)
        exs = [cmlm_mask(pair(3, 5, i), 0.15, rng) for i in range(3)]
        assert np.isfinite(cmlm_loss(teacher, exs).item())


class TestSchedule:
    def test_peak_and_end(self):
        assert triangular_lr(100, 5e-5, 100, 1000) == 5e-5
        assert triangular_lr(1000, 5e-5, 100, 1000) == 0.0

    def test_linear_in_both_phases(self):
        assert triangular_lr(50, 1.0, 100, 300) == pytest.approx(0.5)
        assert triangular_lr(200, 1.0, 100, 300) == pytest.approx(0.5)


class TestVariants:
    def test_small_halves_depth(self, micro_config):
        assert TeacherVariant("small").model_config(micro_config.replace(layers=6)).layers == 3

    def test_left_to_right_is_causal(self):
        assert TeacherVariant("left_to_right").causal
        assert not TeacherVariant("full").causal

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            TeacherVariant("tiny")

    def test_bad_schedule(self):
        with pytest.raises(ConfigError):
            TeacherTrainConfig(warmup_steps=10, total_steps=5)
