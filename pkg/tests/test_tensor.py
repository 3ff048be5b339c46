import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2vkd import tensor as T
from c2vkd.tensor import (
    BackwardError,
    DistributionError,
    ShapeError,
    Tensor,
    backward,
    finite_diff_grad,
    kl_div,
    matmul,
    no_grad,
    softmax,
)

from conftest import assert_grad_ok


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        # 1*3 + 2*4
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_zero_annihilates(self, rng):
        out = matmul(Tensor(np.zeros((2, 2))), Tensor(rng.normal(size=(2, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = (Tensor(rng.normal(size=(3, 3))) for _ in range(3))
            left = matmul(matmul(a, b), c).data
            right = matmul(a, matmul(b, c)).data
            np.testing.assert_allclose(left, right, atol=1e-9, rtol=0)

    def test_gradient_rule(self, rng):
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4, 2))
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        backward(matmul(a, b).sum())
        dC = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, dC @ b0.T)
        np.testing.assert_allclose(b.grad, a0.T @ dC)

    def test_batched_gradient(self, rng):
        b0 = rng.normal(size=(2, 4, 3))
        assert_grad_ok(lambda a: (matmul(a, Tensor(b0)) ** 2).sum(), rng.normal(size=(2, 3, 4)))
        a0 = rng.normal(size=(2, 3, 4))
        assert_grad_ok(lambda b: (matmul(Tensor(a0), b) ** 2).sum(), b0)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_log_inputs(self):
        out = softmax(Tensor([math.log(1), math.log(2), math.log(3)])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] < 1e-300

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.ones((2, 2))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 2))
    def test_rows_sum_to_one(self, seed, axis):
        x = np.random.default_rng(seed).normal(scale=10, size=(3, 4, 5))
        out = softmax(Tensor(x), axis=axis).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-9)

    def test_gradient(self, rng):
        w = rng.normal(size=(3, 5))
        assert_grad_ok(lambda x: (softmax(x, axis=1) * Tensor(w)).sum(), rng.normal(size=(3, 5)))


class TestKlDiv:
    def test_identical(self):
        assert kl_div(Tensor([0.5, 0.5]), Tensor([0.5, 0.5])).item() == 0.0

    def test_value_against_high_precision(self):
        mpmath.mp.dps = 50
        expected = float(mpmath.mpf("0.5") * mpmath.log(2) + mpmath.mpf("0.5") * mpmath.log(mpmath.mpf(2) / 3))
        got = kl_div(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
        assert got == pytest.approx(expected, abs=1e-15)
        assert got == pytest.approx(0.14384, abs=5e-6)

    def test_zero_mass_entry(self):
        out = kl_div(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item()
        assert out == 0.0 and not math.isnan(out)

    def test_rows_are_averaged(self):
        p = Tensor([[0.5, 0.5], [0.5, 0.5]])
        q = Tensor([[0.25, 0.75], [0.5, 0.5]])
        assert kl_div(p, q).item() == pytest.approx(0.5 * kl_div(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_div(Tensor([0.5, 0.5]), Tensor([0.2, 0.3, 0.5]))

    def test_not_normalized(self):
        with pytest.raises(DistributionError):
            kl_div(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))
        with pytest.raises(DistributionError):
            kl_div(Tensor([0.5, 0.5]), Tensor([1.5, -0.5]))

    def test_random_pairs_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = rng.integers(2, 9)
            p = rng.dirichlet(np.ones(n))
            q = rng.dirichlet(np.ones(n))
            assert kl_div(Tensor(p), Tensor(q)).item() >= 0.0
            assert abs(kl_div(Tensor(p), Tensor(p)).item()) < 1e-10

    def test_gradient_vanishes_at_minimum(self, rng):
        logits = rng.normal(size=4)
        q = softmax(Tensor(logits)).detach()
        x = Tensor(logits, requires_grad=True)
        backward(kl_div(softmax(x), q))
        assert np.abs(x.grad).max() < 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        q = Tensor(rng.dirichlet(np.ones(5), size=3))
        assert_grad_ok(lambda x: kl_div(softmax(x, -1), q), rng.normal(size=(3, 5)))
        p = Tensor(rng.dirichlet(np.ones(5), size=3))
        assert_grad_ok(lambda x: kl_div(p, softmax(x, -1)), rng.normal(size=(3, 5)))


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(BackwardError):
            backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        backward((y + y * x).sum())  # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(2 * 3 + 3 * 9)

    def test_graph_released(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()
        backward(y)
        assert y._parents == () and y._rule is None

    def test_every_requires_grad_tensor_gets_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        h = T.exp(x)
        y = (h * 2.0).sum()
        backward(y)
        assert h.grad is not None and x.grad is not None

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_binary_ops_require_equal_shapes(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones((3, 1)))


class TestFiniteDiff:
    def test_sum(self, rng):
        g = finite_diff_grad(lambda t: t.sum(), Tensor(rng.normal(size=(4,))), 1e-5)
        np.testing.assert_allclose(g, 1.0, atol=1e-8)

    def test_square(self):
        g = finite_diff_grad(lambda t: (t * t).sum(), Tensor([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)


ELEMENTWISE = {
    "exp": lambda x: T.exp(x),
    "log": lambda x: T.log(x * x + 1.0),
    "sqrt": lambda x: T.sqrt(x * x + 1.0),
    "gelu": T.gelu,
    "relu": T.relu,
    "reciprocal": lambda x: T.reciprocal(x * x + 1.0),
    "power": lambda x: T.power(x * x + 0.5, 1.5),
    "div": lambda x: x / (x * x + 2.0),
    "log_softmax": lambda x: T.log_softmax(x, -1),
    "plogpq": lambda x: T.plogpq(softmax(x, -1), softmax(x * 0.5, -1)),
    "clamp_min": lambda x: T.clamp_min(x, 0.1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(3, 4)))
    f = ELEMENTWISE[name]
    for _ in range(10):
        x0 = rng.normal(size=(3, 4))
        if name in ("relu", "clamp_min"):
            x0 = x0 + np.sign(x0) * 0.2  # stay away from the kink
        assert_grad_ok(lambda x: (f(x) * w).sum(), x0)


def test_shape_op_gradients(rng):
    w = Tensor(rng.normal(size=(2, 3, 4)))
    assert_grad_ok(lambda x: (T.transpose(x, (1, 0, 2)).reshape(2, 3, 4) * w).sum(), rng.normal(size=(3, 2, 4)))
    assert_grad_ok(lambda x: (T.broadcast_to(x, (2, 3, 4)) * w).sum(), rng.normal(size=(1, 3, 4)))
    w6 = Tensor(rng.normal(size=(2, 6, 4)))
    assert_grad_ok(lambda x: (T.concat([x, x * 2.0], axis=1) * w6).sum(), rng.normal(size=(2, 3, 4)))
    assert_grad_ok(lambda x: (T.slice_axis(x, 1, 1, 3) * Tensor(np.ones((2, 2, 4)))).sum() ** 2, rng.normal(size=(2, 3, 4)))
    assert_grad_ok(lambda x: (T.mean(x, axis=(0, 2)) ** 2).sum(), rng.normal(size=(2, 3, 4)))


def test_layer_norm_and_linear_gradients(rng):
    g0, b0 = rng.normal(size=4), rng.normal(size=4)
    w = Tensor(rng.normal(size=(2, 3, 4)))
    assert_grad_ok(lambda x: (T.layer_norm(x, Tensor(g0), Tensor(b0)) * w).sum(), rng.normal(size=(2, 3, 4)))
    x_fixed = Tensor(rng.normal(size=(2, 3, 4)))
    assert_grad_ok(lambda g: (T.layer_norm(x_fixed, g, Tensor(b0)) * w).sum(), g0)
    W0 = rng.normal(size=(4, 5))
    assert_grad_ok(lambda x: (T.linear(x, Tensor(W0), Tensor(np.ones(5))) ** 2).sum(), rng.normal(size=(2, 3, 4)))
    x0 = rng.normal(size=(2, 3, 4))
    assert_grad_ok(lambda W: (T.linear(Tensor(x0), W) ** 2).sum(), W0)


def test_forward_stays_finite_on_finite_inputs(rng):
    x = Tensor(rng.normal(scale=50, size=(4, 6)))
    for out in (softmax(x, -1), T.log_softmax(x, -1), T.gelu(x), T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))):
        assert np.all(np.isfinite(out.data))
