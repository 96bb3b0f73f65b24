import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmlm_distill import tensor as T
from cmlm_distill.errors import DimensionError, NumericError, VocabularyError
from cmlm_distill.gradcheck import check_gradients, op_cases, rel_error
from cmlm_distill.tensor import Tensor, no_grad


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal((a @ b).data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_matches_finite_differences(self, rng):
        a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 3)))
        T.sum_(a @ b).backward()
        num = numeric_grad(lambda: (a.data @ b.data).sum(), a.data)
        assert rel_error(a.grad, num) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal(8), requires_grad=True)
        w = rng.standard_normal(8)
        T.sum_(T.mul(T.softmax(x), w)).backward()

        def f():
            e = np.exp(x.data - x.data.max())
            return (e / e.sum() * w).sum()

        assert rel_error(x.grad, numeric_grad(f, x.data)) < 1e-6

    def test_masked_entries_are_exactly_zero(self):
        out = T.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
        assert out[1] == 0.0
        assert out.sum() == pytest.approx(1.0)

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([np.nan, 1.0]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
    def test_is_a_distribution(self, x):
        p = T.softmax(Tensor(x)).data
        assert np.all(p >= 0)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_log_softmax_agrees(self, rng):
        x = Tensor(rng.standard_normal((3, 7)))
        np.testing.assert_allclose(np.exp(T.log_softmax(x).data), T.softmax(x).data, atol=1e-14)


class TestOps:
    def test_layer_norm_of_constant_is_zero(self):
        x = Tensor(np.full((2, 6), 3.5))
        y = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_dropout_rate_zero_is_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        assert T.dropout(x, 0.0, rng, training=True) is x
        assert T.dropout(x, 0.5, rng, training=False) is x

    def test_dropout_preserves_expectation(self, rng):
        x = Tensor(np.ones(200_000))
        assert T.dropout(x, 0.3, rng).data.mean() == pytest.approx(1.0, abs=0.01)

    def test_embedding_gradient_is_sparse(self, rng):
        w = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        ids = np.array([[1, 4], [4, 1]])
        proj = rng.standard_normal((2, 2, 3))
        T.sum_(T.mul(T.embedding(w, ids), proj)).backward()
        num = numeric_grad(lambda: (w.data[ids] * proj).sum(), w.data)
        np.testing.assert_allclose(w.grad, num, atol=1e-8)
        untouched = [0, 2, 3, 5]
        assert np.all(w.grad[untouched] == 0.0)
        assert np.all(w.grad[[1, 4]] != 0.0)

    def test_embedding_out_of_range(self):
        with pytest.raises(VocabularyError, match="7"):
            T.embedding(Tensor(np.zeros((5, 2))), np.array([1, 7]))

    def test_add_rejects_non_suffix_broadcast(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


class TestAutodiff:
    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x
        y.backward(np.ones(1))
        assert x.grad.tolist() == [5.0]

    def test_backward_twice_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.sum_(x * x)
        y.backward()
        y.backward()
        assert x.grad.tolist() == [12.0]

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.sum_(y).backward()
        assert x.grad.tolist() == [1.0]


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_finite_differences(name):
    fn, leaves = op_cases()[name]
    result = check_gradients(fn, leaves, name=name)
    assert result.max_rel_error < 1e-6 if name != "attention" else result.passed
