"""Declarative desk-scale experiments: baseline versus distilled students, and teacher ablations."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean
from typing import Sequence

from .checkpoint import save_checkpoint
from .config import Settings
from .decoding import translate_corpus
from .metrics import bleu_by_length, corpus_bleu
from .soft_labels import SoftLabelStore, precompute
from .synthetic import CorpusSpec, split
from .teacher import TeacherResult, TeacherTrainConfig, TeacherVariant, finetune_teacher
from .text import SentencePair, Vocab, WhitespaceTokenizer, build_vocab, corpus_hash, encode_corpus
from .trainer import TrainConfig, train_student
from .transformer import ModelConfig


@dataclass
class Data:
    vocab: Vocab
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]

    @property
    def train_hash(self) -> str:
        return corpus_hash(self.train)


def prepare_data(corpus: CorpusSpec, seed: int = 0, max_len: int = 256) -> Data:
    parts = split(corpus, seed)
    tok = WhitespaceTokenizer()
    src, tgt = parts["train"]
    vocab = build_vocab([tok.training_tokens(line) for line in (*src, *tgt)])
    enc = {k: encode_corpus(s, t, vocab, tok, max_len) for k, (s, t) in parts.items()}
    return Data(vocab, enc["train"], enc["dev"], enc["test"])


@dataclass(frozen=True)
class ExperimentRecipe:
    """Everything needed to rerun an experiment; baseline and distilled runs differ only in alpha."""

    corpus: CorpusSpec
    teacher_model: ModelConfig
    teacher: TeacherTrainConfig
    student_model: ModelConfig
    distilled: TrainConfig
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus_seed: int = 0
    teacher_variant: TeacherVariant = TeacherVariant()
    test_beam: int = 4
    baseline_scale: float = 0.5
    bucket_width: int = 5

    @property
    def baseline(self) -> TrainConfig:
        """The MLE run: alpha = 0, with steps and warmup scaled by ``baseline_scale``."""
        d = self.distilled
        steps = max(1, round(self.baseline_scale * d.total_steps))
        warmup = max(1, round(self.baseline_scale * d.warmup_steps))
        return d.replace(alpha=0.0, total_steps=steps, warmup_steps=warmup)

    @classmethod
    def from_settings(cls, s: Settings, variant: str = "full") -> ExperimentRecipe:
        e = s.experiment
        return cls(s.corpus, s.teacher_model, s.teacher, s.model, s.train, tuple(e.seeds), e.corpus_seed,
                   TeacherVariant(variant), e.test_beam, e.baseline_scale, e.bucket_width)

    def with_variant(self, variant: str) -> ExperimentRecipe:
        return dataclasses.replace(self, teacher_variant=TeacherVariant(variant))


@dataclass
class StudentRun:
    tag: str
    seed: int
    dev_bleu: float
    test_bleu: float
    buckets: list = field(default_factory=list)
    seconds: float = 0.0


def _path(out_dir: Path | None, name: str) -> Path | None:
    return None if out_dir is None else out_dir / name


def run_teacher(recipe: ExperimentRecipe, data: Data, out_dir: Path | None = None) -> TeacherResult:
    name = recipe.teacher_variant.kind
    cfg = recipe.teacher_model.replace(vocab_size=len(data.vocab))
    res = finetune_teacher(data.train, data.dev, cfg, recipe.teacher_variant, recipe.teacher,
                           vocab_hash=data.vocab.hash(), log_path=_path(out_dir, f"teacher_{name}.jsonl"))
    if out_dir is not None:
        save_checkpoint(res.checkpoint, out_dir / f"teacher_{name}.ckpt")
    return res


def build_store(recipe: ExperimentRecipe, data: Data, teacher: TeacherResult,
                out_dir: Path | None = None) -> SoftLabelStore:
    store, _ = precompute(data.train, teacher.model, recipe.distilled.k, recipe.distilled.temperature,
                          _path(out_dir, f"soft_labels_{recipe.teacher_variant.kind}.bin"),
                          vocab_hash=data.vocab.hash(), teacher_hash=teacher.checkpoint.content_hash(),
                          corpus_hash=data.train_hash)
    return store


def run_student(recipe: ExperimentRecipe, data: Data, cfg: TrainConfig, seed: int, tag: str,
                store: SoftLabelStore | None = None, out_dir: Path | None = None) -> StudentRun:
    start = time.perf_counter()
    cfg = cfg.replace(seed=seed)
    model_cfg = recipe.student_model.replace(vocab_size=len(data.vocab))
    res = train_student(data.train, data.dev, model_cfg, cfg, store if cfg.alpha > 0 else None,
                        vocab_hash=data.vocab.hash(), corpus_hash=data.train_hash,
                        log_path=_path(out_dir, f"student_{tag}_seed{seed}.jsonl"))
    if out_dir is not None:
        save_checkpoint(res.checkpoint, out_dir / f"student_{tag}_seed{seed}.ckpt")
    hyps = translate_corpus(res.model, [p.source for p in data.test], beam=recipe.test_beam,
                            length_penalty=cfg.length_penalty)
    refs = [list(p.target) for p in data.test]
    return StudentRun(tag, seed, res.best_dev_bleu, corpus_bleu(hyps, refs),
                      bleu_by_length(hyps, refs, recipe.bucket_width), time.perf_counter() - start)


@dataclass
class Comparison:
    """Per-seed test BLEU for several student configurations."""

    columns: list[str]
    runs: dict[str, list[StudentRun]]
    teacher_accuracy: dict[str, float] = field(default_factory=dict)
    teacher_seconds: dict[str, float] = field(default_factory=dict)

    def mean(self, column: str) -> float:
        return mean(r.test_bleu for r in self.runs[column])

    def to_dict(self) -> dict:
        return {"columns": self.columns, "teacher_accuracy": self.teacher_accuracy,
                "teacher_seconds": self.teacher_seconds,
                "runs": {c: [dataclasses.asdict(r) for r in rs] for c, rs in self.runs.items()},
                "mean_test_bleu": {c: self.mean(c) for c in self.columns}}

    def seconds(self, column: str) -> float:
        """Wall time of a column: its students plus the teacher they were distilled from."""
        return sum(r.seconds for r in self.runs[column]) + self.teacher_seconds.get(column, 0.0)

    def table(self) -> str:
        seeds = [r.seed for r in self.runs[self.columns[0]]]
        labels = {}
        for c in self.columns:
            acc = self.teacher_accuracy.get(c)
            labels[c] = c if acc is None else f"{c} (teacher acc {acc:.3f})"
        width = max(len(v) for v in labels.values()) + 2
        head = f"{'student':<{width}}" + "".join(f"{'seed ' + str(s):>10}" for s in seeds) + f"{'mean':>10}"
        lines = [head, "-" * len(head)]
        for c in self.columns:
            lines.append(f"{labels[c]:<{width}}" + "".join(f"{r.test_bleu:10.2f}" for r in self.runs[c])
                         + f"{self.mean(c):10.2f}")
        return "\n".join(lines)

    def save(self, out_dir: Path, name: str) -> None:
        (out_dir / f"{name}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=vars))
        (out_dir / f"{name}.txt").write_text(self.table() + "\n")


def run_comparison(recipe: ExperimentRecipe, variants: Sequence[str] = ("full",), out_dir: str | Path | None = None,
                   include_baseline: bool = True) -> Comparison:
    """Baseline students plus one distilled student per teacher variant, for every seed."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(recipe.corpus, recipe.corpus_seed, max(recipe.student_model.max_len, 1))
    columns, runs, acc, secs = [], {}, {}, {}
    if include_baseline:
        columns.append("baseline")
        runs["baseline"] = [run_student(recipe, data, recipe.baseline, s, "baseline", out_dir=out)
                            for s in recipe.seeds]
    for v in variants:
        r = recipe.with_variant(v)
        start = time.perf_counter()
        teacher = run_teacher(r, data, out)
        store = build_store(r, data, teacher, out)
        tag = f"distilled_{v}"
        columns.append(tag)
        acc[tag] = teacher.best_accuracy
        secs[tag] = time.perf_counter() - start
        runs[tag] = [run_student(r, data, r.distilled, s, tag, store, out) for s in recipe.seeds]
    return Comparison(columns, runs, acc, secs)


def run_experiment(recipe: ExperimentRecipe, out_dir: str | Path | None = None) -> Comparison:
    """Baseline (alpha = 0) against students distilled from the recipe's teacher."""
    cmp = run_comparison(recipe, (recipe.teacher_variant.kind,), out_dir)
    if out_dir is not None:
        cmp.save(Path(out_dir), "experiment")
    return cmp


def run_ablation(recipe: ExperimentRecipe, variants: Sequence[str] = ("full", "small", "left_to_right"),
                 out_dir: str | Path | None = None) -> Comparison:
    """Distilled students from each teacher variant, next to the baseline."""
    cmp = run_comparison(recipe, variants, out_dir)
    if out_dir is not None:
        cmp.save(Path(out_dir), "ablation")
    return cmp
