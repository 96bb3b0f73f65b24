"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small autograd engine on top of numpy.  Every operation records
its parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` walks the tape in reverse topological order.

Broadcasting is limited to leading batch dimensions: a tensor of shape
``(..., d)`` may be combined with one whose shape is a suffix of it (a bias of
shape ``(d,)``), nothing more exotic.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, VocabularyError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] | None = None
        self._backward = None

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._parents is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autograd ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Gradients add onto whatever ``.grad`` already holds, so calling this
        twice without zeroing doubles them.  The tape is kept, which is what
        makes repeated calls possible.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._parents is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)

    def sum(self, axis=None) -> Tensor:
        return sum_(self, axis)

    def mean(self) -> Tensor:
        return mul(sum_(self), 1.0 / self.data.size)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable dotted name (checkpoint key)."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_suffix(big: tuple, small: tuple, op: str) -> None:
    if len(small) > len(big) or big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {big} and {small} differ beyond leading batch dimensions")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or match trailing dims of ``a``."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        b = np.asarray(b, dtype=a.dtype)
        if b.ndim:
            _check_suffix(a.shape, b.shape, "add")
        return _result(a.data + b, (a,), lambda g: (g,))
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with the same broadcasting rule as :func:`add`."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            _check_suffix(a.shape, c.shape, "mul")
        return _result(a.data * c, (a,), lambda g: (g * c,))
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return _result(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


# -- shape -------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# -- reductions --------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.dtype)
        return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return mul(sum_(a), 1.0 / a.data.size)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a``: (..., m, k).  ``b``: either (k, n), shared across the batch, or
    (..., k, n) with the same leading dimensions as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward)


# -- normalisation & probability ---------------------------------------------

def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    exactly zero probability.  Rows with no allowed entry come out all-zero.
    """
    _check_finite(x.data, "softmax")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y.astype(x.dtype, copy=False), (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result((xhat * gd + beta.data).astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -- indexing ----------------------------------------------------------------

def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; the gradient is scattered back to those rows only."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].ravel()[0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {n}")
    shape = weight.shape

    def backward(g):
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, ids.ravel(), g.reshape(-1, shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward)


def take_last(x: Tensor, idx) -> Tensor:
    """Gather along the last axis: ``out[..., j] = x[..., idx[..., j]]``."""
    idx = np.asarray(idx)
    if idx.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"take_last: index shape {idx.shape} incompatible with {x.shape}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        v = shape[-1]
        rows = np.arange(int(np.prod(shape[:-1]))).repeat(idx.shape[-1])
        np.add.at(gx.reshape(-1, v), (rows, idx.reshape(-1)), g.reshape(-1))
        return (gx,)

    return _result(np.take_along_axis(x.data, idx, axis=-1), (x,), backward)


# -- regularisation ----------------------------------------------------------

def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity (same object) when rate is 0 or not training."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape, dtype=x.dtype) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))

