import unittest

import numpy as np

from tomokit.autodiff import Tensor
from tomokit.errors import ShapeError
from tomokit.gradcheck import grad_check
from tomokit.layers import (BatchNormState, batchnorm2d, conv2d, conv_transpose2d, crop, he_uniform,
                            maxpool2x2, pad_reflect, padded_size, reflect_indices)
from tomokit.refine import SliceStack, encdec_forward, init_encdec


def direct_conv(x, w, b):
    """Loop reference for a zero-padded 'same' convolution."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + k, j:j + k] * w[o]) + b[o]
    return out


class TestLayerValues(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_conv2d_matches_loop(self):
        x = self.rng.standard_normal((2, 3, 5, 4))
        w = self.rng.standard_normal((2, 3, 3, 3))
        b = self.rng.standard_normal(2)
        np.testing.assert_allclose(conv2d(x, w, b).data, direct_conv(x, w, b), atol=1e-12)
        with self.assertRaises(ShapeError):
            conv2d(x, self.rng.standard_normal((2, 3, 2, 2)))
        with self.assertRaises(ShapeError):
            conv2d(x, self.rng.standard_normal((2, 4, 3, 3)))

    def test_transpose_conv_upsamples_by_two(self):
        x = self.rng.standard_normal((1, 2, 3, 4))
        w = self.rng.standard_normal((2, 5, 2, 2))
        out = conv_transpose2d(x, w).data
        self.assertEqual(out.shape, (1, 5, 6, 8))
        expected = np.einsum("c,co->o", x[0, :, 1, 2], w[:, :, 1, 0])
        np.testing.assert_allclose(out[0, :, 3, 4], expected, atol=1e-12)

    def test_maxpool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(maxpool2x2(x).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])
        with self.assertRaises(ShapeError):
            maxpool2x2(np.zeros((1, 1, 3, 4)))

    def test_batchnorm_train_and_eval(self):
        x = self.rng.standard_normal((4, 2, 3, 3)) * 3.0 + 1.0
        state = BatchNormState.create(2)
        out = batchnorm2d(x, np.ones(2), np.zeros(2), state, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
        unbiased = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * unbiased)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))

        before = (state.running_mean.copy(), state.running_var.copy())
        batchnorm2d(x, np.ones(2), np.zeros(2), state, training=False)
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])

    def test_reflect_padding(self):
        np.testing.assert_array_equal(reflect_indices(4, 2), [0, 1, 2, 3, 2, 1])
        np.testing.assert_array_equal(reflect_indices(1, 3), [0, 0, 0, 0])
        self.assertEqual(padded_size(11, 32), 32)
        self.assertEqual(padded_size(64, 32), 64)
        x = np.arange(12.0).reshape(1, 1, 3, 4)
        padded = pad_reflect(x, 1, 4).data
        self.assertEqual(padded.shape, (1, 1, 4, 8))
        np.testing.assert_array_equal(padded[0, 0, 3, :4], x[0, 0, 1])
        np.testing.assert_array_equal(crop(padded, 3, 4).data, x)

    def test_he_uniform_bound(self):
        w = he_uniform(self.rng, (8, 4, 3, 3), fan_in=36)
        self.assertLessEqual(np.abs(w).max(), np.sqrt(6.0 / 36))


class TestLayerGradients(unittest.TestCase):
    def check(self, fn, sampler, op, **kwargs):
        report = grad_check(fn, sampler, op=op, **kwargs)
        self.assertTrue(report.passed, report.summary())

    def test_conv_layers(self):
        sampler = lambda rng: {"x": Tensor(rng.standard_normal((2, 2, 4, 3))),
                               "w": Tensor(rng.standard_normal((3, 2, 3, 3))),
                               "b": Tensor(rng.standard_normal(3)),
                               "wt": Tensor(rng.standard_normal((2, 3, 2, 2)))}
        self.check(lambda t: conv2d(t["x"], t["w"], t["b"]), sampler, "conv2d")
        self.check(lambda t: conv_transpose2d(t["x"], t["wt"], t["b"]), sampler, "conv_transpose2d")

    def test_maxpool_and_padding(self):
        sampler = lambda rng: {"x": Tensor(rng.standard_normal((2, 2, 4, 6)))}
        self.check(lambda t: maxpool2x2(t["x"]), sampler, "maxpool2x2")
        self.check(lambda t: pad_reflect(t["x"], 3, 2), sampler, "pad_reflect")
        self.check(lambda t: crop(t["x"], 3, 5), sampler, "crop")

    def test_batchnorm_both_modes(self):
        def sampler(rng):
            return {"x": Tensor(rng.standard_normal((3, 2, 2, 3))),
                    "gamma": Tensor(rng.uniform(0.5, 1.5, 2)),
                    "beta": Tensor(rng.standard_normal(2))}

        for training in (True, False):
            state = BatchNormState.create(2, momentum=0.0)
            state.running_mean = np.array([0.2, -0.1])
            state.running_var = np.array([1.5, 0.7])
            self.check(lambda t: batchnorm2d(t["x"], t["gamma"], t["beta"], state, training),
                       sampler, f"batchnorm2d(training={training})")

    def test_small_encoder_decoder(self):
        params = init_encdec("ae", (2, 3), seed=1)
        named = {"slices": None}
        for p in params.parameters():
            named[p.name] = p

        def sampler(rng):
            named["slices"] = Tensor(rng.uniform(0.0, 1.0, (2, 1, 4, 4)))
            return named

        def forward(t):
            return encdec_forward(SliceStack(t["slices"], 4, 4, "AE"), params, training=False).data

        self.check(forward, sampler, "encdec", max_entries=6)


if __name__ == "__main__":
    unittest.main()
