"""Engine-level correctness: every op's analytic gradient against central
finite differences, plus broadcasting and shape bookkeeping."""

import numpy as np
import pytest

from chexgraph import autodiff as ad
from chexgraph.gradcheck import relative_gradient_error

RNG = np.random.default_rng(1234)


def leaf(shape, scale=1.0, offset=0.0):
    return ad.parameter(offset + scale * RNG.standard_normal(shape))


class TestElementwise:
    def test_add_mul_chain(self):
        a, b = leaf((3, 4)), leaf((3, 4))
        err = relative_gradient_error(lambda: ((a + b) * a + 2.5 * b).sum(), [a, b])
        assert err < 1e-6

    def test_broadcasting(self):
        a, b = leaf((3, 4)), leaf((4,))
        err = relative_gradient_error(lambda: (a * b + b).sum(), [a, b])
        assert err < 1e-6

    def test_scalar_operand_keeps_dtype(self):
        a = ad.parameter(np.ones((2, 2), dtype=np.float32))
        assert (a * 0.5).dtype == np.float32
        assert (a + 1.0).dtype == np.float32

    def test_log_exp_expm1(self):
        a = leaf((5,), scale=0.3, offset=2.0)
        err = relative_gradient_error(
            lambda: (ad.log(a) + ad.exp(-a) + ad.expm1(a * 0.1)).sum(), [a])
        assert err < 1e-6

    def test_power(self):
        a = leaf((4,), scale=0.2, offset=1.5)
        err = relative_gradient_error(lambda: (a ** 3).sum(), [a])
        assert err < 1e-6

    def test_division(self):
        a, b = leaf((4,), offset=3.0, scale=0.2), leaf((4,), offset=2.0, scale=0.1)
        err = relative_gradient_error(lambda: (a / b).sum(), [a, b])
        assert err < 1e-6

    def test_sigmoid_matches_closed_form(self):
        x = np.linspace(-30, 30, 101)
        s = ad.sigmoid(ad.tensor(x)).data
        np.testing.assert_allclose(s, 1.0 / (1.0 + np.exp(-x)), rtol=1e-12)

    def test_relu_and_clip(self):
        a = leaf((6,), scale=2.0)
        err = relative_gradient_error(lambda: (ad.relu(a) + ad.clip(a, -0.7, 0.9)).sum(), [a])
        assert err < 1e-5  # kinks are measure-zero for random leaves


class TestReductionsAndShapes:
    def test_sum_axis_keepdims(self):
        a = leaf((2, 3, 4))
        err = relative_gradient_error(
            lambda: (a.sum(axis=1, keepdims=True) * a).sum(), [a])
        assert err < 1e-6

    def test_mean(self):
        a = leaf((3, 5))
        np.testing.assert_allclose(a.mean().data, a.data.mean(), rtol=1e-12)

    def test_reshape_transpose(self):
        a = leaf((2, 6))
        err = relative_gradient_error(
            lambda: (a.reshape((3, 4)).T @ ad.tensor(np.ones((3, 2)))).sum(), [a])
        assert err < 1e-6

    def test_getitem_scatter(self):
        a = leaf((4, 4))
        err = relative_gradient_error(lambda: (a[1, 2] * 3.0 + a[1, 2] + a[0, 0]), [a])
        assert err < 1e-6
        loss = a[2]
        assert loss.shape == (4,)

    def test_matmul(self):
        a, b = leaf((3, 4)), leaf((4, 2))
        err = relative_gradient_error(lambda: (a @ b).sum(), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_rows_sum_to_one(self):
        a = leaf((5, 7), scale=3.0)
        s = ad.softmax(a, axis=1).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self):
        a = leaf((3, 4))
        w = ad.tensor(RNG.standard_normal((3, 4)))
        err = relative_gradient_error(lambda: (ad.softmax(a, axis=1) * w).sum(), [a])
        assert err < 1e-6

    def test_columns_axis0(self):
        a = leaf((4, 6))
        s = ad.softmax(a, axis=0).data
        np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)


class TestEuclideanDistance:
    def test_value(self):
        a = ad.tensor(np.zeros(9))
        b = ad.tensor(np.ones(9))
        assert ad.euclidean_distance(a, b).item() == pytest.approx(3.0)

    def test_gradient(self):
        a, b = leaf((2, 5)), leaf((2, 5))
        err = relative_gradient_error(lambda: ad.euclidean_distance(a, b), [a, b])
        assert err < 1e-6

    def test_zero_distance_subgradient_is_zero(self):
        a = ad.parameter(np.ones(4))
        b = ad.parameter(np.ones(4))
        d = ad.euclidean_distance(a, b)
        d.backward()
        np.testing.assert_array_equal(a.grad, np.zeros(4))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.euclidean_distance(ad.tensor(np.ones(3)), ad.tensor(np.ones(4)))


class TestConv:
    def test_conv2d_gradients(self):
        x = leaf((2, 3, 6, 6))
        w = leaf((4, 3, 3, 3), scale=0.5)
        b = leaf((4,), scale=0.1)
        err = relative_gradient_error(
            lambda: ad.conv2d(x, w, b, stride=2, padding=1).sum(), [x, w, b])
        assert err < 1e-6

    def test_conv2d_shape(self):
        x = ad.tensor(np.zeros((1, 3, 64, 64)))
        w = ad.tensor(np.zeros((8, 3, 3, 3)))
        out = ad.conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 8, 32, 32)

    def test_conv2d_matches_direct_computation(self):
        x = RNG.standard_normal((1, 2, 5, 5))
        w = RNG.standard_normal((3, 2, 3, 3))
        out = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=1, padding=0).data
        # quadruple-loop reference
        ref = np.zeros((1, 3, 3, 3))
        for co in range(3):
            for i in range(3):
                for j in range(3):
                    ref[0, co, i, j] = (x[0, :, i:i + 3, j:j + 3] * w[co]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-10)

    def test_max_pool_gradients(self):
        x = leaf((2, 3, 8, 8))
        wfix = ad.tensor(RNG.standard_normal((2, 3, 4, 4)))
        err = relative_gradient_error(
            lambda: (ad.max_pool2d(x, kernel=3, stride=2, padding=1) * wfix).sum(), [x])
        assert err < 1e-5

    def test_batch_norm_training_gradients(self):
        x = leaf((4, 3, 5, 5))
        gamma = leaf((3,), offset=1.0, scale=0.1)
        beta = leaf((3,), scale=0.1)
        wfix = ad.tensor(RNG.standard_normal((4, 3, 5, 5)))

        def f():
            rm = np.zeros(3)  # fresh running stats so FD reevaluates cleanly
            rv = np.ones(3)
            return (ad.batch_norm2d(x, gamma, beta, rm, rv, training=True) * wfix).sum()

        err = relative_gradient_error(f, [x, gamma, beta])
        assert err < 1e-5

    def test_batch_norm_eval_uses_running_stats(self):
        x = ad.tensor(RNG.standard_normal((2, 3, 4, 4)))
        gamma = ad.tensor(np.ones(3))
        beta = ad.tensor(np.zeros(3))
        rm = np.array([1.0, -1.0, 0.5])
        rv = np.array([4.0, 1.0, 0.25])
        out = ad.batch_norm2d(x, gamma, beta, rm, rv, training=False, eps=0.0).data
        ref = (x.data - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv).reshape(1, 3, 1, 1)
        np.testing.assert_allclose(out, ref, rtol=1e-10)


class TestBackwardMechanics:
    def test_grad_accumulates_along_multiple_paths(self):
        x = ad.parameter(np.array(2.0))
        y = x * x + x * 3.0
        y.backward()
        assert x.grad == pytest.approx(2 * 2.0 + 3.0)

    def test_backward_requires_scalar(self):
        x = ad.parameter(np.ones(3))
        with pytest.raises(RuntimeError):
            (x * 2).backward()

    def test_detach_cuts_graph(self):
        x = ad.parameter(np.ones(3))
        y = (x.detach() * 5.0).sum()
        assert not y.requires_grad
