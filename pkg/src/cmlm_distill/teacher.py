"""Conditional masked-LM training of the bidirectional teacher.

Source and target are packed as ``[CLS] X [SEP] Y [SEP]``; only target
tokens are ever masked, so the teacher learns ``P(y_masked | X, Y_unmasked)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, ContractError
from .optim import Adam, triangular_lr
from .tensor import Tensor, no_grad
from .text import CLS, MASK, SEP, SentencePair, make_batches
from .training import LoopConfig, LoopState, MetricsLog, restore_rngs, rng_states, train_loop
from .transformer import ModelConfig, Teacher, build_teacher


@dataclass
class MaskedExample:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    masked_positions: np.ndarray
    labels: np.ndarray
    y_offset: int
    pair_id: int = -1

    @property
    def absolute_positions(self) -> np.ndarray:
        return self.masked_positions + self.y_offset

    @property
    def target_length(self) -> int:
        return len(self.input_ids) - self.y_offset - 1


def pack(pair: SentencePair) -> tuple[np.ndarray, np.ndarray, int]:
    """``[CLS] X [SEP] Y [SEP]`` ids, segment ids (0 for the X span, 1 for the Y span), offset of Y."""
    m, n = len(pair.source), len(pair.target)
    ids = np.array([CLS, *pair.source, SEP, *pair.target, SEP], dtype=np.int64)
    segs = np.concatenate([np.zeros(m + 2, dtype=np.int64), np.ones(n + 1, dtype=np.int64)])
    return ids, segs, m + 2


def mask_count(n: int, rate: float = 0.15) -> int:
    """``round(rate * n)`` with halves rounded up, clamped to ``[1, n]``."""
    k = int((Decimal(repr(rate)) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(n, max(1, k))


def mask_positions(pair: SentencePair, positions: Sequence[int]) -> MaskedExample:
    ids, segs, off = pack(pair)
    pos = np.asarray(sorted(positions), dtype=np.int64)
    labels = ids[pos + off].copy()
    ids[pos + off] = MASK
    return MaskedExample(ids, segs, pos, labels, off, pair.pair_id)


def cmlm_mask(pair: SentencePair, rate: float = 0.15, rng: np.random.Generator | None = None) -> MaskedExample:
    """Replace ``mask_count(N)`` distinct, uniformly drawn target positions with MASK."""
    n = len(pair.target)
    if n < 1:
        raise ContractError(f"pair {pair.pair_id} has an empty target")
    rng = rng if rng is not None else np.random.default_rng()
    chosen = rng.choice(n, size=mask_count(n, rate), replace=False)
    return mask_positions(pair, chosen)


@dataclass
class PackedBatch:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    padding: np.ndarray
    flat_positions: np.ndarray
    labels: np.ndarray

    @property
    def denominator(self) -> int:
        return len(self.labels)


def collate_masked(examples: Sequence[MaskedExample]) -> PackedBatch:
    width = max(len(e.input_ids) for e in examples)
    b = len(examples)
    ids = np.zeros((b, width), dtype=np.int64)
    segs = np.zeros((b, width), dtype=np.int64)
    pad = np.ones((b, width), dtype=bool)
    flat, labels = [], []
    for i, e in enumerate(examples):
        n = len(e.input_ids)
        ids[i, :n] = e.input_ids
        segs[i, :n] = e.segment_ids
        pad[i, :n] = False
        flat.append(i * width + e.absolute_positions)
        labels.append(e.labels)
    return PackedBatch(ids, segs, pad, np.concatenate(flat), np.concatenate(labels))


def masked_cross_entropy(logits: Tensor, flat_positions: np.ndarray, labels: np.ndarray,
                         reduction: str = "mean") -> Tensor:
    """Cross-entropy at the listed positions of ``logits`` (B, L, V); other positions get no gradient."""
    if len(flat_positions) == 0:
        raise ContractError("no masked positions in batch")
    v = logits.shape[-1]
    rows = T.embedding(logits.reshape(-1, v), flat_positions)
    logp = T.log_softmax(rows)
    total = -T.sum_(T.take_last(logp, labels[:, None]))
    return total * (1.0 / len(labels)) if reduction == "mean" else total


def cmlm_loss(teacher: Teacher, examples: Sequence[MaskedExample] | PackedBatch, rng=None,
              reduction: str = "mean") -> Tensor:
    batch = examples if isinstance(examples, PackedBatch) else collate_masked(examples)
    logits = teacher(batch.input_ids, batch.segment_ids, batch.padding, rng)
    return masked_cross_entropy(logits, batch.flat_positions, batch.labels, reduction)


def predict_masked(teacher: Teacher, examples: Sequence[MaskedExample]) -> list[np.ndarray]:
    """Logits (k_i, V) at the masked positions of each example, in eval mode."""
    if not examples:
        return []
    batch = collate_masked(examples)
    with no_grad():
        logits = teacher(batch.input_ids, batch.segment_ids, batch.padding).data
    flat = logits.reshape(-1, logits.shape[-1])[batch.flat_positions]
    sizes = np.cumsum([len(e.masked_positions) for e in examples])[:-1]
    return np.split(flat, sizes)


def masked_accuracy(teacher: Teacher, pairs: Sequence[SentencePair], batch_size: int = 64,
                    replicas: int = 7) -> float:
    """Accuracy over every target position, each predicted once under circular masking."""
    from .soft_labels import circular_replicas

    was_training = teacher.training
    teacher.eval()
    correct = total = 0
    examples = [ex for p in pairs for ex in circular_replicas(p, replicas) if len(ex.masked_positions)]
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        for ex, lg in zip(chunk, predict_masked(teacher, chunk)):
            correct += int((lg.argmax(-1) == ex.labels).sum())
            total += len(ex.labels)
    teacher.train(was_training)
    return correct / max(total, 1)


# -- variants ----------------------------------------------------------------

VARIANTS = ("full", "small", "left_to_right")


@dataclass(frozen=True)
class TeacherVariant:
    kind: str = "full"
    depth_override: int | None = None

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"teacher variant must be one of {VARIANTS}, got {self.kind!r}")

    @property
    def causal(self) -> bool:
        return self.kind == "left_to_right"

    def model_config(self, base: ModelConfig) -> ModelConfig:
        if self.depth_override is not None:
            return base.replace(layers=self.depth_override)
        if self.kind == "small":
            return base.replace(layers=max(1, base.layers // 2))
        return base


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TeacherTrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    token_budget: int = 1024
    accum_steps: int = 1
    mask_rate: float = 0.15
    eval_every: int = 250
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.warmup_steps < 1 or self.total_steps < self.warmup_steps:
            raise ConfigError(f"invalid teacher schedule: {self}")
        if not 0 < self.mask_rate <= 1:
            raise ConfigError(f"mask_rate must be in (0, 1], got {self.mask_rate}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class _TeacherTask:
    def __init__(self, model, train, dev, cfg: TeacherTrainConfig, rngs):
        self.model = model
        self.train = train
        self.dev = dev
        self.cfg = cfg
        self.rngs = rngs
        self.by_id = {p.pair_id: p for p in train}

    def batches(self, epoch):
        return make_batches(self.train, self.cfg.token_budget, rngmod.epoch_seed(self.cfg.seed, epoch))

    def prepare(self, batch):
        # masks are redrawn every time a pair is visited, i.e. once per epoch
        return collate_masked([cmlm_mask(self.by_id[int(i)], self.cfg.mask_rate, self.rngs["masking"])
                               for i in batch.pair_ids])

    def loss(self, item):
        loss = cmlm_loss(self.model, item, self.rngs["dropout"], reduction="sum")
        return loss, {"loss": loss.item()}

    def evaluate(self):
        return {"masked_accuracy": masked_accuracy(self.model, self.dev)}

    def lr(self, step):
        return triangular_lr(step, self.cfg.lr, self.cfg.warmup_steps, self.cfg.total_steps)


@dataclass
class TeacherResult:
    model: Teacher
    checkpoint: Checkpoint
    log: MetricsLog

    @property
    def best_accuracy(self) -> float:
        return self.checkpoint.meta["loop"]["best_metric"]


def _teacher_checkpoint(model, optimizer, state, variant, cfg, rngs, vocab_hash) -> Checkpoint:
    return Checkpoint(
        kind="teacher",
        model_config=model.config,
        params=model.state_dict(),
        meta={"causal": variant.causal, "variant": dataclasses.asdict(variant), "train_config": cfg.to_dict(),
              "loop": state.to_meta(), "rng": rng_states(rngs), "vocab_hash": vocab_hash},
        optimizer=optimizer.state_dict(),
        best_params=state.best_params,
    )


def finetune_teacher(train: Sequence[SentencePair], dev: Sequence[SentencePair], model_config: ModelConfig,
                     variant: TeacherVariant = TeacherVariant(), cfg: TeacherTrainConfig = TeacherTrainConfig(),
                     vocab_hash: str = "", log_path: str | Path | None = None,
                     checkpoint_path: str | Path | None = None, resume: Checkpoint | None = None) -> TeacherResult:
    """Train a teacher from scratch with the C-MLM objective and a triangular LR schedule.

    Returns the best-dev (masked accuracy) weights.  When ``checkpoint_path``
    is set, the full training state is written there at every evaluation so
    an interrupted run can be resumed bit-exactly via ``resume``.
    """
    model = build_teacher(variant.model_config(model_config), rngmod.stream(cfg.seed, "init"), causal=variant.causal)
    rngs = {"masking": rngmod.stream(cfg.seed, "masking"), "dropout": rngmod.stream(cfg.seed, "dropout")}
    optimizer = Adam(model.parameters())
    state = None
    if resume is not None:
        model.load_state_dict(resume.params)
        optimizer.load_state_dict(resume.optimizer)
        restore_rngs(rngs, resume.meta["rng"])
        state = LoopState.from_meta(resume.meta["loop"], resume.best_params)
        log = MetricsLog.reopen(log_path) if log_path else MetricsLog()
        log.truncate_after(state.step)
    else:
        log = MetricsLog(log_path)
    task = _TeacherTask(model, list(train), list(dev), cfg, rngs)
    loop = LoopConfig(cfg.total_steps, cfg.accum_steps, cfg.eval_every, cfg.log_every, metric="masked_accuracy")

    def on_checkpoint(st):
        if checkpoint_path is not None:
            save_checkpoint(_teacher_checkpoint(model, optimizer, st, variant, cfg, rngs, vocab_hash), checkpoint_path)

    state = train_loop(task, optimizer, loop, rngs, log, state, on_checkpoint)
    ckpt = _teacher_checkpoint(model, optimizer, state, variant, cfg, rngs, vocab_hash)
    model.load_state_dict(state.best_params)
    model.eval()
    return TeacherResult(model, ckpt, log)
