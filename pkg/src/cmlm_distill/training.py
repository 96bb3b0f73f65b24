"""Optimisation loop shared by teacher finetuning and student training.

The loop owns the things both stages need to get exactly right for
resumption: the epoch/batch cursor, gradient accumulation, the best-so-far
snapshot and the metrics log.  Stage-specific behaviour comes in through a
small task object (see :class:`Task`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np

from .errors import TrainingError
from .optim import Adam
from .rng import get_state, set_state


class MetricsLog:
    """Line-delimited JSON records, mirrored in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def truncate_after(self, step: int) -> None:
        """Drop records past ``step`` (used when resuming from an earlier checkpoint)."""
        self.records = [r for r in self.records if r.get("step", 0) <= step]
        if self.path is not None:
            self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))

    @classmethod
    def reopen(cls, path: str | Path) -> MetricsLog:
        log = cls.__new__(cls)
        log.path = Path(path)
        text = log.path.read_text() if log.path.exists() else ""
        log.records = [json.loads(ln) for ln in text.splitlines() if ln]
        return log


class Prepared(Protocol):
    denominator: int


class Task(Protocol):
    model: Any

    def batches(self, epoch: int) -> list: ...

    def prepare(self, batch) -> Prepared: ...

    def loss(self, item: Prepared) -> tuple[Any, dict[str, float]]: ...

    def evaluate(self) -> dict[str, float]: ...

    def lr(self, step: int) -> float: ...


@dataclass
class LoopConfig:
    total_steps: int
    accum_steps: int = 1
    eval_every: int = 0
    log_every: int = 1
    metric: str = "metric"


@dataclass
class LoopState:
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    best_metric: float | None = None
    best_step: int = 0
    best_params: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    def to_meta(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "batch_index": self.batch_index,
                "best_metric": self.best_metric, "best_step": self.best_step}

    @classmethod
    def from_meta(cls, meta: dict, best_params=None) -> LoopState:
        return cls(meta["step"], meta["epoch"], meta["batch_index"], meta["best_metric"],
                   meta["best_step"], best_params)


def train_loop(task: Task, optimizer: Adam, cfg: LoopConfig, rngs: dict[str, np.random.Generator],
               log: MetricsLog, state: LoopState | None = None,
               on_checkpoint: Callable[[LoopState], None] | None = None) -> LoopState:
    """Run optimiser updates until ``cfg.total_steps``.

    Each update consumes ``accum_steps`` consecutive batches; their summed
    losses are divided by the total denominator of the window, so the update
    equals the one a single batch holding all of them would produce.
    """
    state = state or LoopState()
    model = task.model
    model.train()
    epoch_batches = task.batches(state.epoch)

    def next_batch():
        nonlocal epoch_batches
        while state.batch_index >= len(epoch_batches):
            state.epoch += 1
            state.batch_index = 0
            epoch_batches = task.batches(state.epoch)
        b = epoch_batches[state.batch_index]
        state.batch_index += 1
        return b

    def evaluate():
        model.eval()
        metrics = task.evaluate()
        model.train()
        value = metrics[cfg.metric]
        if state.best_metric is None or value > state.best_metric:
            state.best_metric = value
            state.best_step = state.step
            state.best_params = model.state_dict()
        log.write({"step": state.step, "event": "eval", **metrics,
                   "best_metric": state.best_metric, "best_step": state.best_step})
        if on_checkpoint is not None:
            on_checkpoint(state)

    while state.step < cfg.total_steps:
        items = [task.prepare(next_batch()) for _ in range(cfg.accum_steps)]
        denom = sum(it.denominator for it in items)
        totals: dict[str, float] = {}
        optimizer.zero_grad()
        for it in items:
            loss_sum, parts = task.loss(it)
            value = loss_sum.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {state.step + 1}")
            (loss_sum * (1.0 / denom)).backward()
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v
        lr = task.lr(state.step + 1)
        optimizer.step(lr)
        state.step += 1
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.write({"step": state.step, "event": "train", "lr": lr, "tokens": denom,
                       **{k: v / denom for k, v in totals.items()}})
        if cfg.eval_every and state.step % cfg.eval_every == 0:
            evaluate()
    if not cfg.eval_every or state.step % cfg.eval_every:
        evaluate()
    optimizer.zero_grad()
    return state


def rng_states(rngs: dict[str, np.random.Generator]) -> dict:
    return {k: get_state(g) for k, g in sorted(rngs.items())}


def restore_rngs(rngs: dict[str, np.random.Generator], states: dict) -> None:
    for k, s in states.items():
        set_state(rngs[k], s)
