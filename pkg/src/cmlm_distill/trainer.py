"""Student training: label-smoothed MLE plus distillation from stored soft labels."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .checkpoint import Checkpoint, load_into, save_checkpoint
from .errors import ConfigError, ContractError, IntegrityError
from .optim import Adam, noam_lr
from .soft_labels import SoftLabelStore
from .tensor import Tensor
from .text import BOS, EOS, PAD, Batch, SentencePair, make_batches
from .training import LoopConfig, LoopState, MetricsLog, restore_rngs, rng_states, train_loop
from .transformer import ModelConfig, Student, build_student


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    temperature: float = 10.0
    k: int = 8
    lr: float = 2.0
    warmup_steps: int = 400
    total_steps: int = 3000
    token_budget: int = 1024
    accum_steps: int = 1
    lsr_epsilon: float = 0.1
    eval_every: int = 500
    log_every: int = 50
    dev_beam: int = 1
    length_penalty: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not 0.0 <= self.lsr_epsilon < 1.0:
            raise ConfigError(f"lsr_epsilon must be in [0, 1), got {self.lsr_epsilon}")
        if self.accum_steps < 1 or self.total_steps < 1 or self.token_budget < 1:
            raise ConfigError("accum_steps, total_steps and token_budget must be positive")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- losses ------------------------------------------------------------------

def _weights(pad: np.ndarray, dtype) -> tuple[np.ndarray, int]:
    w = (~pad).astype(dtype)
    n = int(w.sum())
    if n == 0:
        raise ContractError("batch has no non-pad target positions")
    return w, n


def _reduce(per_token: Tensor, pad: np.ndarray, reduction: str) -> Tensor:
    w, n = _weights(pad, per_token.dtype)
    total = T.sum_(T.mul(per_token, w))
    return total * (1.0 / n) if reduction == "mean" else total


def xe_from_logp(logp: Tensor, targets: np.ndarray, pad: np.ndarray, lsr_epsilon: float,
                 reduction: str = "mean") -> Tensor:
    v = logp.shape[-1]
    nll = -T.take_last(logp, targets[..., None]).reshape(targets.shape)
    if lsr_epsilon > 0:
        smooth = T.sum_(logp, axis=-1) * (-1.0 / v)
        per = nll * (1.0 - lsr_epsilon) + smooth * lsr_epsilon
    else:
        per = nll
    return _reduce(per, pad, reduction)


def bidi_from_logp(logp: Tensor, topk_ids: np.ndarray, topk_probs: np.ndarray, pad: np.ndarray,
                   reduction: str = "mean") -> Tensor:
    picked = T.take_last(logp, topk_ids)
    per = -T.sum_(T.mul(picked, topk_probs.astype(logp.dtype)), axis=-1)
    return _reduce(per, pad, reduction)


def xe_loss(logits: Tensor, targets: np.ndarray, pad: np.ndarray | None = None, lsr_epsilon: float = 0.1,
            reduction: str = "mean") -> Tensor:
    """Cross-entropy against ``(1 - eps) * onehot + eps / V``, averaged over non-pad positions."""
    targets = np.asarray(targets)
    pad = targets == PAD if pad is None else pad
    return xe_from_logp(T.log_softmax(logits), targets, pad, lsr_epsilon, reduction)


def bidi_loss(logits: Tensor, topk_ids: np.ndarray, topk_probs: np.ndarray, pad: np.ndarray | None = None,
              reduction: str = "mean") -> Tensor:
    """Cross-entropy against the teacher's top-K distribution at every non-pad position."""
    topk_ids = np.asarray(topk_ids)
    pad = np.zeros(topk_ids.shape[:-1], dtype=bool) if pad is None else pad
    return bidi_from_logp(T.log_softmax(logits), topk_ids, np.asarray(topk_probs), pad, reduction)


def compound_loss(xe: Tensor, bidi: Tensor, alpha) -> Tensor:
    """``alpha * bidi + (1 - alpha) * xe``; ``alpha`` may itself be a Tensor."""
    if not isinstance(alpha, Tensor) and not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * bidi + (1.0 - alpha) * xe


# -- batches -----------------------------------------------------------------

@dataclass
class StudentBatch:
    pair_ids: np.ndarray
    source: np.ndarray
    source_pad: np.ndarray
    target_in: np.ndarray
    target_out: np.ndarray
    target_pad: np.ndarray
    topk_ids: np.ndarray | None = None
    topk_probs: np.ndarray | None = None

    @property
    def denominator(self) -> int:
        return int((~self.target_pad).sum())


class SoftTargets:
    """Per-pair (N+1, K) soft targets: the stored records plus a one-hot EOS row."""

    def __init__(self, store: SoftLabelStore, pairs: Sequence[SentencePair]):
        self.k = store.k
        self.table: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for p in pairs:
            ids, probs = store.for_pair(p.pair_id, len(p.target))
            eos_ids = np.zeros((1, self.k), dtype=np.int64)
            eos_ids[0, 0] = EOS
            eos_probs = np.zeros((1, self.k))
            eos_probs[0, 0] = 1.0
            self.table[p.pair_id] = (np.vstack([ids, eos_ids]), np.vstack([probs, eos_probs]))

    def __call__(self, pair_ids: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
        ids = np.zeros((len(pair_ids), width, self.k), dtype=np.int64)
        probs = np.zeros((len(pair_ids), width, self.k))
        for i, pid in enumerate(pair_ids):
            a, b = self.table[int(pid)]
            ids[i, : len(a)] = a
            probs[i, : len(b)] = b
        return ids, probs


def student_batch(batch: Batch, soft: SoftTargets | None = None) -> StudentBatch:
    """Shift targets for teacher forcing: input ``BOS y1..yN``, output ``y1..yN EOS``."""
    b, n = batch.target.shape
    lens = (~batch.target_pad).sum(axis=1)
    t_in = np.full((b, n + 1), PAD, dtype=np.int64)
    t_out = np.full((b, n + 1), PAD, dtype=np.int64)
    t_in[:, 0] = BOS
    t_in[:, 1:] = np.where(batch.target_pad, PAD, batch.target)
    t_out[:, :n] = np.where(batch.target_pad, PAD, batch.target)
    t_out[np.arange(b), lens] = EOS
    pad = np.arange(n + 1)[None, :] > lens[:, None]
    sb = StudentBatch(batch.pair_ids, batch.source, batch.source_pad, t_in, t_out, pad)
    if soft is not None:
        sb.topk_ids, sb.topk_probs = soft(batch.pair_ids, n + 1)
    return sb


def batch_losses(model: Student, sb: StudentBatch, alpha: float | None, lsr_epsilon: float, rng=None,
                 reduction: str = "mean") -> dict[str, Tensor]:
    """Forward pass and the loss terms. ``alpha=None`` means plain MLE (no soft targets)."""
    logits = model(sb.source, sb.target_in, sb.source_pad, rng)
    logp = T.log_softmax(logits)
    xe = xe_from_logp(logp, sb.target_out, sb.target_pad, lsr_epsilon, reduction)
    if alpha is None:
        return {"xe": xe, "loss": xe}
    bidi = bidi_from_logp(logp, sb.topk_ids, sb.topk_probs, sb.target_pad, reduction)
    return {"xe": xe, "bidi": bidi, "loss": compound_loss(xe, bidi, alpha)}


# -- training ----------------------------------------------------------------

class _StudentTask:
    def __init__(self, model, train, dev, cfg: TrainConfig, rngs, soft: SoftTargets | None, vocab_size: int):
        self.model = model
        self.train = train
        self.dev = dev
        self.cfg = cfg
        self.rngs = rngs
        self.soft = soft
        self.alpha = cfg.alpha if soft is not None else None

    def batches(self, epoch):
        return make_batches(self.train, self.cfg.token_budget, rngmod.epoch_seed(self.cfg.seed, epoch))

    def prepare(self, batch):
        return student_batch(batch, self.soft)

    def loss(self, item):
        terms = batch_losses(self.model, item, self.alpha, self.cfg.lsr_epsilon, self.rngs["dropout"], "sum")
        return terms["loss"], {k: v.item() for k, v in terms.items()}

    def evaluate(self):
        from .decoding import translate_corpus
        from .metrics import corpus_bleu

        hyps = translate_corpus(self.model, [p.source for p in self.dev], beam=self.cfg.dev_beam,
                                length_penalty=self.cfg.length_penalty)
        return {"dev_bleu": corpus_bleu(hyps, [list(p.target) for p in self.dev])}

    def lr(self, step):
        return noam_lr(step, self.cfg.lr, self.model.config.d_model, self.cfg.warmup_steps)


@dataclass
class StudentResult:
    model: Student
    checkpoint: Checkpoint
    log: MetricsLog

    @property
    def best_dev_bleu(self) -> float:
        return self.checkpoint.meta["loop"]["best_metric"]


def _student_checkpoint(model, optimizer, state, cfg, rngs, hashes) -> Checkpoint:
    return Checkpoint(
        kind="student",
        model_config=model.config,
        params=model.state_dict(),
        meta={"train_config": cfg.to_dict(), "loop": state.to_meta(), "rng": rng_states(rngs), **hashes},
        optimizer=optimizer.state_dict(),
        best_params=state.best_params,
    )


def train_student(train: Sequence[SentencePair], dev: Sequence[SentencePair], model_config: ModelConfig,
                  cfg: TrainConfig = TrainConfig(), store: SoftLabelStore | None = None, *,
                  vocab_hash: str = "", corpus_hash: str = "", init: Checkpoint | None = None,
                  log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
                  resume: Checkpoint | None = None) -> StudentResult:
    """Train the encoder-decoder student with Adam under the Noam schedule.

    Without a store the objective is label-smoothed MLE.  With one, it is
    ``alpha * L_bidi + (1 - alpha) * L_xe``; the store's vocabulary and
    corpus hashes must match the ones passed in.  ``init`` warm-starts the
    weights from another student checkpoint.  Returns the best-dev-BLEU weights.
    """
    if store is None and cfg.alpha > 0:
        raise ConfigError(f"alpha={cfg.alpha} needs a soft-label store")
    soft = None
    hashes = {"vocab_hash": vocab_hash, "corpus_hash": corpus_hash}
    if store is not None:
        expected = {k: v for k, v in hashes.items() if v}
        store.validate(**expected)
        if store.k != cfg.k:
            raise IntegrityError(f"store K={store.k} but training config K={cfg.k}")
        soft = SoftTargets(store, train)
        hashes["store_teacher_hash"] = store.header.get("teacher_hash", "")
        hashes["store_temperature"] = store.temperature

    model = build_student(model_config, rngmod.stream(cfg.seed, "init"))
    if init is not None:
        load_into(model, init, use_best=True)
    rngs = {"dropout": rngmod.stream(cfg.seed, "dropout")}
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

    task = _StudentTask(model, list(train), list(dev), cfg, rngs, soft, model_config.vocab_size)
    loop = LoopConfig(cfg.total_steps, cfg.accum_steps, cfg.eval_every, cfg.log_every, metric="dev_bleu")

    def on_checkpoint(st):
        if checkpoint_path is not None:
            save_checkpoint(_student_checkpoint(model, optimizer, st, cfg, rngs, hashes), checkpoint_path)

    state = train_loop(task, optimizer, loop, rngs, log, state, on_checkpoint)
    ckpt = _student_checkpoint(model, optimizer, state, cfg, rngs, hashes)
    model.load_state_dict(state.best_params)
    model.eval()
    return StudentResult(model, ckpt, log)
