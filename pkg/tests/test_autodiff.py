import unittest

import numpy as np

from tomokit.autodiff import (ComplexTensor, Tensor, absolute, add, complex_abs, complex_add, complex_matmul,
                              complex_scale, complex_soft_threshold, concat, index, inverse_softplus,
                              matmul, maximum, mean, mul, neg, no_grad, relu, reshape, softplus, square,
                              sub, sum_, take, transpose)
from tomokit.errors import GradientCheckError, NonFiniteError, ShapeError
from tomokit.gradcheck import grad_check
from tomokit.solvers import soft_threshold


def away_from_zero(rng, shape, margin=0.1):
    """Standard normal entries pushed at least `margin` away from 0."""
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + margin, x - margin)


class TestTensor(unittest.TestCase):
    def test_gradients_accumulate_over_paths(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = sum_(add(mul(x, x), x))
        y.backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0])

    def test_shared_subgraph_is_visited_once(self):
        x = Tensor(3.0, requires_grad=True)
        h = square(x)
        out = add(h, h)
        out.backward()
        self.assertAlmostEqual(float(x.grad), 12.0)

    def test_backward_accumulates_across_calls(self):
        x = Tensor(2.0, requires_grad=True)
        square(x).backward()
        square(x).backward()
        self.assertAlmostEqual(float(x.grad), 8.0)
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_broadcast_gradients_are_summed(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        sum_(mul(a, b)).backward()
        np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with no_grad():
            y = square(x)
        self.assertFalse(y.requires_grad)
        self.assertTrue(square(x).requires_grad)

    def test_non_finite_results_raise(self):
        with self.assertRaisesRegex(NonFiniteError, "mul"):
            mul(Tensor(np.array([1e308])), Tensor(np.array([10.0])))

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with self.assertRaises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()
        with self.assertRaises(TypeError):
            Tensor(np.array([1j]))

    def test_softplus_is_stable_and_invertible(self):
        out = softplus(Tensor(np.array([-800.0, 0.0, 800.0])))
        np.testing.assert_allclose(out.data, [0.0, np.log(2.0), 800.0])
        for value in (1e-4, 0.5, 3.0, 40.0):
            self.assertAlmostEqual(float(softplus(Tensor(inverse_softplus(value))).data), value, places=10)

    def test_maximum_ties_go_to_first(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 3.0]), requires_grad=True)
        sum_(maximum(a, b)).backward()
        np.testing.assert_array_equal(a.grad, [1.0, 0.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0])

    def test_complex_soft_threshold_matches_solver_prox(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
        theta = np.array([0.3, 0.8, 1.5])
        out = complex_soft_threshold(ComplexTensor.from_array(z), Tensor(theta), eps=0.0)
        np.testing.assert_allclose(out.numpy(), soft_threshold(z, theta), atol=1e-14)
        zero = complex_soft_threshold(ComplexTensor.from_array(np.zeros(2, complex)), Tensor(0.0), eps=0.0)
        np.testing.assert_array_equal(zero.numpy(), np.zeros(2))

    def test_complex_matmul_matches_numpy(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
        out = complex_matmul(ComplexTensor.from_array(a), ComplexTensor.from_array(b))
        np.testing.assert_allclose(out.numpy(), a @ b, atol=1e-12)
        np.testing.assert_allclose(complex_abs(out).data, np.abs(a @ b), atol=1e-12)


class TestOpGradients(unittest.TestCase):
    """Central differences against every op's backward."""

    def check(self, fn, sampler, op, **kwargs):
        report = grad_check(fn, sampler, op=op, **kwargs)
        self.assertTrue(report.passed, report.summary())

    def test_elementwise_ops(self):
        sampler = lambda rng: {"a": Tensor(away_from_zero(rng, (3, 4))),
                               "b": Tensor(away_from_zero(rng, (1, 4)))}
        self.check(lambda t: add(t["a"], t["b"]), sampler, "add")
        self.check(lambda t: sub(t["a"], t["b"]), sampler, "sub")
        self.check(lambda t: mul(t["a"], t["b"]), sampler, "mul")
        self.check(lambda t: neg(t["a"]), sampler, "neg")
        self.check(lambda t: square(t["a"]), sampler, "square")
        self.check(lambda t: absolute(t["a"]), sampler, "abs")
        self.check(lambda t: relu(t["a"]), sampler, "relu")
        self.check(lambda t: maximum(t["a"], t["b"]), sampler, "maximum")
        self.check(lambda t: softplus(t["a"]), sampler, "softplus")

    def test_reductions_and_shape_ops(self):
        sampler = lambda rng: {"a": Tensor(rng.standard_normal((2, 3, 4)))}
        self.check(lambda t: sum_(t["a"], axis=1), sampler, "sum")
        self.check(lambda t: mean(t["a"], axis=(0, 2)), sampler, "mean")
        self.check(lambda t: mean(t["a"]), sampler, "mean_all")
        self.check(lambda t: reshape(t["a"], (6, 4)), sampler, "reshape")
        self.check(lambda t: transpose(t["a"], (2, 0, 1)), sampler, "transpose")
        self.check(lambda t: concat([t["a"], square(t["a"])], axis=2), sampler, "concat")
        self.check(lambda t: index(t["a"], (slice(None), slice(None), np.array([0, 0, 3]))), sampler, "index")
        self.check(lambda t: take(t["a"], np.array([0, 1, 2, 1]), axis=1), sampler, "take")

    def test_matmul(self):
        sampler = lambda rng: {"a": Tensor(rng.standard_normal((3, 5))), "b": Tensor(rng.standard_normal((5, 2)))}
        self.check(lambda t: matmul(t["a"], t["b"]), sampler, "matmul")

    def test_complex_ops(self):
        def sampler(rng):
            z = rng.standard_normal((4, 3)) + 1j * rng.standard_normal((4, 3))
            w = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
            return {"z.re": Tensor(z.real), "z.im": Tensor(z.imag),
                    "w.re": Tensor(w.real), "w.im": Tensor(w.imag),
                    "theta": Tensor(np.array([0.05, 0.1, 0.2])), "scale": Tensor(np.array(1.7))}

        z = lambda t: ComplexTensor(t["z.re"], t["z.im"])
        w = lambda t: ComplexTensor(t["w.re"], t["w.im"])
        self.check(lambda t: complex_matmul(w(t), z(t)), sampler, "complex_matmul")
        self.check(lambda t: complex_add(z(t), z(t)), sampler, "complex_add")
        self.check(lambda t: complex_scale(z(t), t["scale"]), sampler, "complex_scale")
        self.check(lambda t: complex_abs(z(t)), sampler, "complex_abs")
        self.check(lambda t: complex_soft_threshold(z(t), t["theta"]), sampler, "complex_soft_threshold")

    def test_broken_backward_is_caught(self):
        from tomokit.autodiff import _result, as_tensor

        def wrong_square(a):
            a = as_tensor(a)
            return _result(a.data ** 2, "wrong_square", (a,), lambda g: (a.data * g,))

        sampler = {"a": Tensor(np.array([1.0, 2.0, -1.5]))}
        with self.assertRaises(GradientCheckError):
            grad_check(lambda t: wrong_square(t["a"]), sampler, op="wrong_square")
        report = grad_check(lambda t: wrong_square(t["a"]), sampler, op="wrong_square",
                            raise_on_failure=False)
        self.assertFalse(report.passed)
        self.assertAlmostEqual(report.errors["a"], 0.5, places=5)


if __name__ == "__main__":
    unittest.main()
