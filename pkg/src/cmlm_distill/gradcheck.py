"""Central finite-difference checks for every differentiable op and both models.

Each case builds a scalar from a list of float64 leaf tensors.  The analytic
gradient from :meth:`Tensor.backward` is compared with
``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate.  The error of a
leaf is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-5)``;
the floor keeps gradients that are exactly zero in theory (the key bias of
attention, by shift invariance of softmax) from turning difference noise
into a relative error of 1.  A case passes when the worst leaf is below the
tolerance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor
from .transformer import AttentionMask, ModelConfig, MultiHeadAttention, build_student, build_teacher

MICRO = ModelConfig(layers=2, d_model=8, heads=2, d_ff=16, dropout=0.0, vocab_size=11, max_len=32, dtype="float64")
STEP = 1e-5
TOLERANCE = 1e-4
SCALE_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coordinates: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = STEP, name: str = "") -> CheckResult:
    """Compare ``backward`` of the scalar ``fn()`` with central differences w.r.t. ``leaves``."""
    start = time.perf_counter()
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    fn().backward()
    worst, coords = 0.0, 0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        worst = max(worst, rel_error(analytic, numeric))
        coords += flat.size
    return CheckResult(name, worst, coords, time.perf_counter() - start)


def _leaf(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.abs(x) + low
    return Tensor(x, requires_grad=True)


def _project(y: Tensor, seed: int = 99) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output coordinate matters."""
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return T.sum_(T.mul(y, w))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {}

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 4)
    cases["add_broadcast"] = (lambda: _project(a + b), [a, b])
    c, d = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    cases["sub_neg"] = (lambda: _project(c - d), [c, d])
    e, f = _leaf(rng, 2, 3, 4), _leaf(rng, 4)
    cases["mul_broadcast"] = (lambda: _project(e * f), [e, f])
    g = _leaf(rng, 3, 4)
    cases["scalar_div"] = (lambda: _project(g / 3.0), [g])
    m1, w1 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    cases["matmul_shared"] = (lambda: _project(m1 @ w1), [m1, w1])
    m2, w2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    cases["matmul_batched"] = (lambda: _project(m2 @ w2), [m2, w2])
    r = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * (0.1 + rng.random((3, 4))), requires_grad=True)
    cases["relu"] = (lambda: _project(T.relu(r)), [r])
    x = _leaf(rng, 3, 4)
    cases["exp"] = (lambda: _project(T.exp(x)), [x])
    p = _leaf(rng, 3, 4, low=0.5)
    cases["log"] = (lambda: _project(T.log(p)), [p])
    s = _leaf(rng, 2, 3, 4)
    cases["reshape"] = (lambda: _project(s.reshape(6, 4)), [s])
    cases["transpose"] = (lambda: _project(s.transpose(2, 0, 1)), [s])
    cases["swap_last"] = (lambda: _project(T.swap_last(s)), [s])
    cases["sum_axis"] = (lambda: _project(T.sum_(s, axis=1)), [s])
    cases["sum_all"] = (lambda: T.sum_(s) * T.sum_(s), [s])
    cases["mean"] = (lambda: T.mean(s) * T.mean(s), [s])
    sm = _leaf(rng, 2, 3, 5)
    mask = rng.random((2, 3, 5)) > 0.3
    mask[..., 0] = True
    cases["softmax_masked"] = (lambda: _project(T.softmax(sm, axis=-1, mask=mask)), [sm])
    cases["softmax_axis0"] = (lambda: _project(T.softmax(sm, axis=0)), [sm])
    cases["log_softmax"] = (lambda: _project(T.log_softmax(sm)), [sm])
    ln_x, ln_g, ln_b = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    cases["layer_norm"] = (lambda: _project(T.layer_norm(ln_x, ln_g, ln_b)), [ln_x, ln_g, ln_b])
    emb = _leaf(rng, 7, 4)
    ids = np.array([[1, 3, 3], [0, 6, 1]])
    cases["embedding"] = (lambda: _project(T.embedding(emb, ids)), [emb])
    tl = _leaf(rng, 2, 3, 6)
    idx = rng.integers(0, 6, size=(2, 3, 4))
    cases["take_last"] = (lambda: _project(T.take_last(tl, idx)), [tl])
    dx = _leaf(rng, 3, 8)
    cases["dropout"] = (lambda: _project(T.dropout(dx, 0.3, np.random.default_rng(5), True)), [dx])

    att = MultiHeadAttention(8, 2, 0.0, np.random.default_rng(seed), np.float64)
    q, kv = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8)
    key_pad = np.array([[False, False, False, True], [False, False, False, False]])
    amask = AttentionMask.padding_only(3, key_pad)
    cases["attention"] = (lambda: _project(att(q, kv, amask)), [q, kv, *att.parameters()])
    return cases


def _micro_batch(seed: int):
    rng = np.random.default_rng(seed)
    src = rng.integers(7, MICRO.vocab_size, size=(2, 4))
    tgt = rng.integers(7, MICRO.vocab_size, size=(2, 4))
    src[1, 3] = 0
    tgt[1, 3] = 0
    return src, tgt


def model_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Parameter]]]:
    from .teacher import cmlm_loss, mask_positions
    from .text import SentencePair
    from .trainer import StudentBatch, batch_losses

    cases = {}
    student = build_student(MICRO, seed)
    src, tgt = _micro_batch(seed)
    t_in = np.concatenate([np.ones((2, 1), dtype=np.int64), tgt], axis=1)
    t_out = np.concatenate([tgt, np.zeros((2, 1), dtype=np.int64)], axis=1)
    t_out[0, 4] = 2
    t_out[1, 3] = 2
    t_pad = t_out == 0
    rng = np.random.default_rng(seed + 1)
    k = 3
    ids = rng.integers(0, MICRO.vocab_size, size=(2, 5, k))
    probs = rng.dirichlet(np.ones(k), size=(2, 5))
    sb = StudentBatch(np.arange(2), src, src == 0, t_in, t_out, t_pad, ids, probs)
    cases["student_compound"] = (lambda: batch_losses(student, sb, 0.5, 0.1)["loss"], student.parameters())

    for name, causal in (("teacher_bidirectional", False), ("teacher_left_to_right", True)):
        teacher = build_teacher(MICRO.replace(positional="learned"), seed, causal=causal)
        exs = [mask_positions(SentencePair((7, 8, 9), (10, 7, 9, 8), 0), [1, 3]),
               mask_positions(SentencePair((8, 9), (9, 10, 7), 1), [0])]
        cases[name] = (lambda t=teacher, e=exs: cmlm_loss(t, e), teacher.parameters())
    return cases


def run_suite(include_models: bool = True, seed: int = 0) -> list[CheckResult]:
    results = [check_gradients(fn, leaves, name=name) for name, (fn, leaves) in op_cases(seed).items()]
    if include_models:
        results += [check_gradients(fn, leaves, name=name) for name, (fn, leaves) in model_cases(seed).items()]
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    lines = [f"{'case':<24} {'max rel err':>12} {'coords':>7} {'sec':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.max_rel_error:12.3e} {r.coordinates:7d} {r.seconds:6.2f}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
