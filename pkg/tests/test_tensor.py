from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bitforge import tensor as T
from bitforge.quant import QuantConfig, QuantFormat, fake_quant, fake_quant_ste
from bitforge.tensor import DimensionError, Graph, GradientError, Tensor, grad_check


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity_left(self, rng):
        b = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(T.matmul(np.eye(3), b).data, b)

    def test_hand_case(self):
        out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_grad(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert grad_check(lambda: T.sum(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b]) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax([0.0, 0, 0, 0]).data, [0.25] * 4)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=6)
        np.testing.assert_allclose(T.softmax(x + 37.5).data, T.softmax(x).data, atol=1e-15)

    def test_no_overflow(self):
        p = T.softmax([1000.0, 0.0]).data
        assert np.isfinite(p).all()
        assert p[0] == pytest.approx(1.0) and p[1] < 1e-300

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        p = T.softmax(x).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.log_softmax(x).data, np.log(np.maximum(p, 1e-300)), atol=1e-9)


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Graph() as g:
            g.backward(T.sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_square_grad(self, rng):
        w = Tensor(rng.normal(size=5), requires_grad=True)
        with Graph() as g:
            g.backward(T.sum(T.mul(w, w)))
        np.testing.assert_allclose(w.grad, 2 * w.data, rtol=1e-15)

    def test_two_layer_net_finite_difference(self, rng):
        x = rng.normal(size=(6, 4))
        w1 = Tensor(rng.normal(size=(4, 5)) * 0.5, requires_grad=True)
        w2 = Tensor(rng.normal(size=(5, 3)) * 0.5, requires_grad=True)
        targets = rng.integers(0, 3, size=6)

        def loss():
            return T.cross_entropy(T.matmul(T.gelu(T.matmul(x, w1)), w2), targets)

        assert grad_check(loss, [w1, w2], eps=1e-5) < 1e-4

    def test_non_scalar_loss_rejected(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with Graph() as g:
            y = T.mul(w, 2.0)
            with pytest.raises(GradientError):
                g.backward(y)

    def test_no_recording_outside_graph(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with Graph() as g:
            pass
        T.sum(w)
        assert g.nodes == []

    def test_tape_cleared_after_backward(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with Graph() as g:
            g.backward(T.sum(T.exp(w)))
        assert g.nodes == []

    def test_leaf_grads_accumulate(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        for _ in range(2):
            with Graph() as g:
                g.backward(T.sum(w))
        np.testing.assert_array_equal(w.grad, 2 * np.ones(3))

    def test_reused_tensor(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        with Graph() as g:
            y = T.add(w, w)
            g.backward(T.sum(T.mul(y, w)))
        np.testing.assert_allclose(w.grad, 4 * w.data)


class TestPrimitiveGrads:
    @pytest.mark.parametrize("op", [
        lambda x: T.sum(T.exp(T.mul(x, 0.3))),
        lambda x: T.sum(T.log(T.add(T.mul(x, x), 1.0))),
        lambda x: T.sum(T.mul(T.softmax(x), T.softmax(x))),
        lambda x: T.sum(T.mul(T.log_softmax(x), T.softmax(x))),
        lambda x: T.sum(T.mul(T.gelu(x), x)),
        lambda x: T.sum(T.mul(T.transpose(x), T.transpose(x))),
        lambda x: T.sum(T.mul(T.reshape(x, (12,)), T.reshape(x, (12,)))),
        lambda x: T.mean(T.mul(T.sum(x, axis=1, keepdims=True), x)),
        lambda x: T.sum(T.mul(T.broadcast_to(T.sum(x, axis=0), (5, 4)), 1.5)),
        lambda x: T.sum(T.sub(T.neg(x), T.mul(x, x))),
    ])
    def test_matches_finite_differences(self, op, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert grad_check(lambda: op(x), [x]) < 1e-6

    def test_layer_norm(self, rng):
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = Tensor(1 + 0.1 * rng.normal(size=6), requires_grad=True)
        b = Tensor(0.1 * rng.normal(size=6), requires_grad=True)
        c = rng.normal(size=(3, 6))
        assert grad_check(lambda: T.sum(T.mul(T.layer_norm(x, w, b), c)), [x, w, b]) < 1e-5

    def test_embedding_repeated_ids(self, rng):
        table = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        ids = np.array([[1, 1, 4], [6, 1, 0]])
        c = rng.normal(size=(2, 3, 3))
        assert grad_check(lambda: T.sum(T.mul(T.embedding(table, ids), c)), [table]) < 1e-6

    def test_masked_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(2, 5, 9)), requires_grad=True)
        targets = rng.integers(0, 9, size=(2, 5))
        mask = np.array([[0, 1, 1, 1, 0], [1, 1, 0, 0, 0]], dtype=float)
        assert grad_check(lambda: T.cross_entropy(logits, targets, mask), [logits]) < 1e-4


class TestGradCheck:
    def test_quadratic(self, rng):
        w = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        A = rng.normal(size=(4, 4))
        assert grad_check(lambda: T.sum(T.mul(T.matmul(w, A), w)), [w]) < 1e-7

    def test_softmax_ce_head(self, rng):
        h = rng.normal(size=(5, 6))
        w = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        y = rng.integers(0, 4, size=5)
        assert grad_check(lambda: T.cross_entropy(T.matmul(h, w), y), [w]) < 1e-4

    def test_ste_layer_exact(self, rng):
        w = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        cfg = QuantConfig(2, QuantFormat.INT_ASYM, 4)
        x = rng.normal(size=(5, 8))
        with Graph() as g:
            out = T.matmul(x, T.transpose(fake_quant_ste(w, cfg)))
            g.backward(T.sum(out))
        # pass-through analytic grad of sum(x @ Wᵀ) is column sums of x repeated per row
        np.testing.assert_array_equal(w.grad, np.tile(x.sum(0), (3, 1)))
        np.testing.assert_array_equal(out.data, x @ fake_quant(w, cfg).T)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(FloatingPointError):
            grad_check(lambda: T.sum(T.log(T.sub(w, 1.0))), [w])
