"""Module containers and the basic trainable layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import IntegrityError
from .tensor import Parameter, Tensor


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes in definition
    order: ``Parameter`` objects, child ``Module`` objects and lists of
    modules.  A parameter reachable under two paths (weight tying) is reported
    once, under the first path.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self, prefix: str) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield prefix + key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{prefix}{key}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        stack = [(prefix, self)]
        while stack:
            pre, mod = stack.pop(0)
            children = []
            for name, value in mod._children(pre):
                if isinstance(value, Parameter):
                    if id(value) not in seen:
                        seen.add(id(value))
                        yield name, value
                else:
                    children.append((name + ".", value))
            stack[0:0] = children

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children(""):
            if isinstance(value, Module):
                yield from value.modules()

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise IntegrityError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise IntegrityError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float64, std: float | None = None):
        std = dim ** -0.5 if std is None else std
        self.weight = Parameter(rng.normal(0.0, std, size=(num, dim)).astype(dtype))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""

    def __init__(self, d_model: int, d_ff: int, dropout: float, rng: np.random.Generator, dtype=np.float64):
        self.w1 = Linear(d_model, d_ff, rng, dtype)
        self.w2 = Linear(d_ff, d_model, rng, dtype)
        self.dropout = dropout

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = T.relu(self.w1(x))
        h = T.dropout(h, self.dropout, rng, self.training)
        return self.w2(h)
