"""Adam and the two learning-rate schedules."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, IntegrityError
from .tensor import Parameter


def noam_lr(step: int, eta: float, d_model: int, warmup_steps: int) -> float:
    """``eta * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``; step counts from 1."""
    if step < 1:
        raise ContractError(f"noam_lr is defined for step >= 1, got {step}")
    return eta * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def triangular_lr(step: int, eta: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> eta over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if step <= warmup_steps:
        return eta * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return eta * (total_steps - step) / (total_steps - warmup_steps)


class Adam:
    """Adam with bias correction; the learning rate is supplied per step."""

    def __init__(self, params: list[Parameter], betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or not all(names):
            raise ValueError("Adam needs uniquely named parameters")
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {p.name: m.copy() for p, m in zip(self.params, self.m)},
            "v": {p.name: v.copy() for p, v in zip(self.params, self.v)},
        }

    def load_state_dict(self, state: dict) -> None:
        names = [p.name for p in self.params]
        if sorted(state["m"]) != sorted(names):
            raise IntegrityError("optimizer state does not match the model's parameters")
        self.t = int(state["t"])
        self.m = [np.array(state["m"][n], dtype=p.dtype) for n, p in zip(names, self.params)]
        self.v = [np.array(state["v"][n], dtype=p.dtype) for n, p in zip(names, self.params)]
