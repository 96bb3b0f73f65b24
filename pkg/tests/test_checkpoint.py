import shutil

import numpy as np
import pytest

import cmlm_distill.teacher as teacher_mod
import cmlm_distill.trainer as trainer_mod
from cmlm_distill.checkpoint import (Checkpoint, build_from_checkpoint, load_checkpoint, load_into,
                                     save_checkpoint)
from cmlm_distill.errors import IntegrityError
from cmlm_distill.optim import Adam
from cmlm_distill.soft_labels import precompute
from cmlm_distill.synthetic import CorpusSpec, split
from cmlm_distill.teacher import TeacherTrainConfig, TeacherVariant, finetune_teacher
from cmlm_distill.text import build_vocab, encode_corpus
from cmlm_distill.trainer import TrainConfig, train_student
from cmlm_distill.transformer import ModelConfig, build_student


@pytest.fixture(scope="module")
def toy():
    parts = split(CorpusSpec.toy_reversal(200), 0)
    src, tgt = parts["train"]
    vocab = build_vocab([s.split() for s in (*src, *tgt)])
    return vocab, encode_corpus(*parts["train"], vocab), encode_corpus(*parts["dev"], vocab)[:10]


def small(v, **kw):
    base = dict(layers=1, d_model=16, heads=2, d_ff=32, dropout=0.1, vocab_size=v, max_len=40, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


class TestFormat:
    def make(self, micro_config):
        model = build_student(micro_config, 0)
        opt = Adam(model.parameters())
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        opt.step(1e-3)
        return model, Checkpoint("student", micro_config, model.state_dict(), {"note": "x"}, opt.state_dict(),
                                 model.state_dict())

    def test_round_trip_is_bitwise(self, tmp_path, micro_config):
        model, ckpt = self.make(micro_config)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        assert loaded.meta == ckpt.meta and loaded.model_config == micro_config
        for k, v in ckpt.params.items():
            assert loaded.params[k].tobytes() == v.tobytes()
            assert loaded.optimizer["m"][k].tobytes() == ckpt.optimizer["m"][k].tobytes()
        assert loaded.optimizer["t"] == 1
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        rebuilt = build_from_checkpoint(loaded)
        assert all(rebuilt.state_dict()[k].tobytes() == v.tobytes() for k, v in ckpt.params.items())

    def test_mismatched_config_is_refused_with_diff(self, tmp_path, micro_config):
        _, ckpt = self.make(micro_config)
        other = build_student(micro_config.replace(d_ff=32), 0)
        with pytest.raises(IntegrityError, match=r"d_ff: model=32 checkpoint=16"):
            load_into(other, ckpt)

    def test_truncated_file(self, tmp_path, micro_config):
        _, ckpt = self.make(micro_config)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(data[:-10])
        with pytest.raises(IntegrityError, match="truncated"):
            load_checkpoint(tmp_path / "b.ckpt")
        (tmp_path / "c.ckpt").write_bytes(data + b"x")
        with pytest.raises(IntegrityError, match="trailing"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello\n")
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "x")


def capture_saves(monkeypatch, module):
    """Keep a copy of every intermediate checkpoint, keyed by step."""
    real = module.save_checkpoint

    def save(ckpt, path):
        real(ckpt, path)
        shutil.copy(path, f"{path}.step{ckpt.meta['loop']['step']}")

    monkeypatch.setattr(module, "save_checkpoint", save)


def test_teacher_resume_equivalence(tmp_path, toy, monkeypatch):
    vocab, train, dev = toy
    capture_saves(monkeypatch, teacher_mod)
    cfg = TeacherTrainConfig(lr=1e-3, warmup_steps=5, total_steps=20, token_budget=60, eval_every=10, log_every=1)
    mc = small(len(vocab), positional="learned")
    full = finetune_teacher(train, dev, mc, TeacherVariant(), cfg, log_path=tmp_path / "full.jsonl",
                            checkpoint_path=tmp_path / "t.ckpt")
    shutil.copy(tmp_path / "full.jsonl", tmp_path / "resumed.jsonl")
    mid = load_checkpoint(tmp_path / "t.ckpt.step10")
    resumed = finetune_teacher(train, dev, mc, TeacherVariant(), cfg, log_path=tmp_path / "resumed.jsonl",
                               resume=mid)
    assert (tmp_path / "full.jsonl").read_bytes() == (tmp_path / "resumed.jsonl").read_bytes()
    for k, v in full.checkpoint.params.items():
        assert resumed.checkpoint.params[k].tobytes() == v.tobytes()


def test_student_resume_equivalence(tmp_path, toy, monkeypatch):
    vocab, train, dev = toy
    capture_saves(monkeypatch, trainer_mod)
    store, _ = precompute(train, lambda exs: [np.zeros((len(e.labels), len(vocab))) for e in exs], k=8)
    cfg = TrainConfig(alpha=0.5, lr=1.0, warmup_steps=5, total_steps=16, token_budget=60, eval_every=8,
                      log_every=1)
    mc = small(len(vocab))
    full = train_student(train, dev, mc, cfg, store, log_path=tmp_path / "full.jsonl",
                         checkpoint_path=tmp_path / "s.ckpt")
    shutil.copy(tmp_path / "full.jsonl", tmp_path / "resumed.jsonl")
    resumed = train_student(train, dev, mc, cfg, store, log_path=tmp_path / "resumed.jsonl",
                            resume=load_checkpoint(tmp_path / "s.ckpt.step8"))
    assert (tmp_path / "full.jsonl").read_bytes() == (tmp_path / "resumed.jsonl").read_bytes()
    for k, v in full.checkpoint.params.items():
        assert resumed.checkpoint.params[k].tobytes() == v.tobytes()


def test_same_seed_gives_identical_logs(tmp_path, toy):
    vocab, train, dev = toy
    cfg = TrainConfig(alpha=0.0, lr=1.0, warmup_steps=5, total_steps=10, token_budget=60, eval_every=5,
                      log_every=1, seed=3)
    for name in ("a", "b"):
        train_student(train, dev, small(len(vocab)), cfg, log_path=tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    train_student(train, dev, small(len(vocab)), cfg.replace(seed=4), log_path=tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()
