"""Seed-derived random streams, one per purpose.

Every source of randomness (parameter init, masking, dropout, batching) draws
from its own generator spawned from the run seed, so changing how much one
consumer draws never perturbs another.
"""
from __future__ import annotations

import numpy as np

PURPOSES = ("init", "masking", "dropout", "batching", "data")


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}; expected one of {PURPOSES}")
    key = (PURPOSES.index(purpose), *extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def epoch_seed(seed: int, epoch: int) -> np.random.Generator:
    """Generator for the batch order of one epoch."""
    return stream(seed, "batching", epoch)


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
