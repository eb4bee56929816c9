"""Finite-difference verification of every gradient-engine operation."""
import numpy as np
import pytest

from himpc import autodiff as ad
from himpc.autodiff import Tensor


def fd_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = fn(x)
        x[idx] = orig - eps
        f_minus = fn(x)
        x[idx] = orig
        g[idx] = (f_plus - f_minus) / (2 * eps)
        it.iternext()
    return g


def check_op(build, x, atol=1e-7):
    """Compare tape gradient of sum(build(x)) against finite differences."""
    leaf = Tensor(x.copy(), requires_grad=True)
    out = ad.sum_(build(leaf))
    out.backward()
    numeric = fd_grad(lambda arr: float(np.sum(build(Tensor(arr)).data)), x.copy())
    np.testing.assert_allclose(leaf.grad, numeric, atol=atol)


class TestElementwise:
    def test_add_broadcast(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        bias = Tensor(rng.normal(size=(3,)), requires_grad=True)
        leaf = Tensor(x.copy(), requires_grad=True)
        out = ad.sum_(leaf + bias)
        out.backward()
        np.testing.assert_allclose(leaf.grad, np.ones((4, 3)))
        np.testing.assert_allclose(bias.grad, np.full(3, 4.0))

    def test_mul(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 2))
        b = rng.normal(size=(5, 2))
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        ad.sum_(ta * tb).backward()
        np.testing.assert_allclose(ta.grad, b)
        np.testing.assert_allclose(tb.grad, a)

    def test_relu(self):
        x = np.array([[-2.0, -0.5, 0.5, 2.0]])
        check_op(ad.relu, x)

    def test_scale_and_neg(self):
        x = np.random.default_rng(2).normal(size=(3, 3))
        check_op(lambda t: ad.scale(t, -2.5), x)


class TestMatmul:
    def test_2d_both_sides(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(3, 5))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ad.sum_(ta @ tb).backward()
        numeric_a = fd_grad(lambda arr: float(np.sum(arr @ b)), a.copy())
        numeric_b = fd_grad(lambda arr: float(np.sum(a @ arr)), b.copy())
        np.testing.assert_allclose(ta.grad, numeric_a, atol=1e-7)
        np.testing.assert_allclose(tb.grad, numeric_b, atol=1e-7)

    def test_batched_left(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 4, 3))
        b = rng.normal(size=(3, 3))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ad.sum_(ta @ tb).backward()
        numeric_a = fd_grad(lambda arr: float(np.sum(arr @ b)), a.copy())
        numeric_b = fd_grad(lambda arr: float(np.sum(a @ arr)), b.copy())
        np.testing.assert_allclose(ta.grad, numeric_a, atol=1e-7)
        np.testing.assert_allclose(tb.grad, numeric_b, atol=1e-7)

    def test_transpose(self):
        x = np.random.default_rng(5).normal(size=(3, 4))
        check_op(lambda t: ad.transpose(t) @ Tensor(np.ones((3, 2))), x)


class TestReductionsAndIndexing:
    def test_mean_axis(self):
        x = np.random.default_rng(6).normal(size=(4, 6, 2))
        check_op(lambda t: ad.mean(t, axis=1), x)

    def test_sum_axis_negative(self):
        x = np.random.default_rng(7).normal(size=(3, 5))
        check_op(lambda t: ad.sum_(t, axis=-1), x)

    def test_reshape(self):
        x = np.random.default_rng(8).normal(size=(2, 6))
        check_op(lambda t: ad.reshape(t, (4, 3)), x)

    def test_take_rows_scatter_adds(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 3))
        idx = np.array([0, 2, 0, 3, 2])
        leaf = Tensor(x, requires_grad=True)
        ad.sum_(ad.take_rows(leaf, idx)).backward()
        expected = np.zeros_like(x)
        np.add.at(expected, idx, 1.0)
        np.testing.assert_allclose(leaf.grad, expected)


class TestSoftmaxFamily:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 4)) * 3
        out = ad.softmax(Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_grad(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        check_op(lambda t: ad.softmax(t, axis=-1) * Tensor(w), x)

    def test_neg_log_softmax_value(self):
        # Two logits (1, -1), label 0: loss = log(1 + exp(-2)).
        logits = Tensor(np.array([[1.0, -1.0]]))
        out = ad.neg_log_softmax_at(logits, np.array([0]))
        np.testing.assert_allclose(out.data[0], np.log1p(np.exp(-2.0)), atol=1e-15)

    def test_neg_log_softmax_grad_2d(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        check_op(lambda t: ad.neg_log_softmax_at(t, labels), x)

    def test_neg_log_softmax_grad_3d(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 3, 4))
        labels = rng.integers(0, 4, size=(2, 3))
        check_op(lambda t: ad.neg_log_softmax_at(t, labels), x)

    def test_neg_log_softmax_single_class_is_zero(self):
        logits = Tensor(np.array([[3.7], [-1.2]]))
        out = ad.neg_log_softmax_at(logits, np.array([0, 0]))
        assert out.data[0] == 0.0 and out.data[1] == 0.0

    def test_label_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.neg_log_softmax_at(Tensor(np.zeros((2, 3))), np.zeros(3, dtype=int))


class TestGraphMechanics:
    def test_diamond_accumulation(self):
        # y = x*x + x*x: gradient must be 4x, not 2x.
        x = Tensor(np.array(3.0), requires_grad=True)
        y = (x * x) + (x * x)
        y.backward()
        np.testing.assert_allclose(x.grad, 12.0)

    def test_constants_do_not_collect_grad(self):
        c = ad.constant(np.ones((2, 2)))
        leaf = Tensor(np.ones((2, 2)), requires_grad=True)
        ad.sum_(leaf * c).backward()
        assert c.grad is None

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            t.backward()
