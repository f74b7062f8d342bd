import unittest

import numpy as np

from tomokit.autodiff import ComplexTensor, Tensor
from tomokit.errors import CheckpointError, ShapeError
from tomokit.geometry import TomoGeometry, build_steering_matrix
from tomokit.gradcheck import grad_check
from tomokit.prenet import (ZERO_LOGIT, echo_columns, pre_image_magnitude, pre_image_volume, prenet_forward,
                            prenet_init_from_geometry)
from tomokit.solvers import SolverConfig, ista_reconstruct, spectral_norm_squared
from tests.helpers import orthogonal_geometry


class TestPreNetInit(unittest.TestCase):
    def setUp(self):
        self.A = build_steering_matrix(TomoGeometry()).entries
        rng = np.random.default_rng(0)
        self.G = rng.standard_normal((11, 1000)) + 1j * rng.standard_normal((11, 1000))

    def test_untied_init_reproduces_ista(self):
        mu = 0.9 / spectral_norm_squared(self.A)
        theta = 0.5
        params = prenet_init_from_geometry(self.A, mu0=mu, theta0=mu * theta, K=5, eps=0.0)
        out = prenet_forward(self.G, params).numpy()
        reference = ista_reconstruct(self.G, self.A, SolverConfig(variant="ista", step=mu, threshold=theta,
                                                                  max_iters=5, stop_tol=0.0))
        self.assertLess(np.abs(out - reference.estimate).max(), 1e-9)

    def test_step_variant_reproduces_ista(self):
        mu = 0.9 / spectral_norm_squared(self.A)
        params = prenet_init_from_geometry(self.A, mu0=mu, theta0=mu * 0.2, K=3, variant="step", eps=0.0)
        out = prenet_forward(self.G[:, :50], params).numpy()
        reference = ista_reconstruct(self.G[:, :50], self.A, SolverConfig(variant="ista", step=mu, threshold=0.2,
                                                                         max_iters=3, stop_tol=0.0))
        self.assertLess(np.abs(out - reference.estimate).max(), 1e-9)

    def test_defaults_and_parameter_counts(self):
        untied = prenet_init_from_geometry(self.A)
        np.testing.assert_allclose(untied.thresholds(), np.full(5, 0.11))
        self.assertEqual(untied.parameter_count(), 5 * (2 * 128 * 11 + 2 * 128 * 128 + 1))
        step = prenet_init_from_geometry(self.A, variant="step")
        self.assertEqual(step.parameter_count(), 10)
        self.assertEqual(sorted(step.named_tensors())[:2], ["prenet.block1.mu", "prenet.block1.theta"])

    def test_zero_threshold_maps_to_floor_logit(self):
        params = prenet_init_from_geometry(self.A, theta0=0.0, K=1)
        self.assertEqual(float(params.blocks[0].theta_raw.data), ZERO_LOGIT)
        self.assertLess(params.thresholds()[0], 1e-20)

    def test_blocks_do_not_share_tensors(self):
        params = prenet_init_from_geometry(self.A, K=2)
        params.blocks[0].W1.im.data[0, 1] += 1.0
        self.assertNotEqual(params.blocks[0].W1.im.data[0, 1], params.blocks[1].W1.im.data[0, 1])

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            prenet_init_from_geometry(self.A, K=0)
        with self.assertRaises(ValueError):
            prenet_init_from_geometry(self.A, variant="tied")
        with self.assertRaises(ShapeError):
            prenet_forward(self.G[:5], prenet_init_from_geometry(self.A, K=1))


class TestPreNetForward(unittest.TestCase):
    def setUp(self):
        self.geom = orthogonal_geometry(8, 6)
        self.A = build_steering_matrix(self.geom).entries
        rng = np.random.default_rng(1)
        self.echoes = rng.standard_normal((8, 3, 4)) + 1j * rng.standard_normal((8, 3, 4))

    def test_columns_are_range_major(self):
        columns = echo_columns(self.echoes)
        np.testing.assert_array_equal(columns[:, 1 * 4 + 2], self.echoes[:, 1, 2])

    def test_volume_matches_column_solve(self):
        params = prenet_init_from_geometry(self.A, K=3)
        volume = pre_image_volume(self.echoes, params)
        self.assertEqual(volume.shape, (3, 4, 6))
        direct = prenet_forward(self.echoes[:, 2, 1][:, None], params).numpy()[:, 0]
        np.testing.assert_allclose(volume[2, 1], direct, atol=1e-12)
        chunked = pre_image_volume(self.echoes, params, slices_per_pass=1)
        np.testing.assert_allclose(chunked, volume, atol=1e-12)
        magnitude = pre_image_magnitude(self.echoes, params)
        np.testing.assert_allclose(magnitude.data, np.abs(volume), atol=1e-12)

    def test_column_permutation_commutes(self):
        G = self.echoes.reshape(8, -1)
        perm = np.random.default_rng(2).permutation(G.shape[1])
        for variant in ("untied", "step"):
            params = prenet_init_from_geometry(self.A, K=3, variant=variant)
            out = prenet_forward(G, params).numpy()
            np.testing.assert_allclose(prenet_forward(G[:, perm], params).numpy(), out[:, perm], atol=1e-12)

    def test_thresholds_stay_nonnegative_after_raw_updates(self):
        rng = np.random.default_rng(3)
        for variant in ("untied", "step"):
            params = prenet_init_from_geometry(self.A, K=4, variant=variant)
            raw = [-1e3, -40.0] + list(rng.normal(0.0, 20.0, size=2))
            for block, value in zip(params.blocks, raw):
                block.theta_raw.data = np.array(value)
                if block.step_raw is not None:
                    block.step_raw.data = np.array(-value)
            self.assertTrue(np.all(params.thresholds() >= 0.0))
            for block in params.blocks:
                if block.step_raw is not None:
                    self.assertGreaterEqual(float(block.step.data), 0.0)

    def test_load_tensors_validates(self):
        params = prenet_init_from_geometry(self.A, K=2)
        tensors = params.named_tensors()
        other = prenet_init_from_geometry(self.A, K=2, theta0=1.0)
        other.load_tensors(tensors)
        np.testing.assert_array_equal(other.thresholds(), params.thresholds())
        del tensors["prenet.block2.theta"]
        with self.assertRaises(CheckpointError):
            other.load_tensors(tensors)
        tensors["prenet.block2.theta"] = np.zeros(2)
        with self.assertRaises(CheckpointError):
            other.load_tensors(tensors)

    def test_gradients_of_both_variants(self):
        G = self.echoes.reshape(8, -1)[:, :3]
        for variant in ("untied", "step"):
            params = prenet_init_from_geometry(self.A, K=2, variant=variant)
            named = {p.name: p for p in params.parameters()}
            report = grad_check(lambda t: prenet_forward(G, params), named, op=f"prenet[{variant}]",
                                max_entries=12)
            self.assertTrue(report.passed, report.summary())

    def test_gradient_reaches_echo_input(self):
        params = prenet_init_from_geometry(self.A, K=2)
        G = self.echoes.reshape(8, -1)[:, :2]
        inputs = {"G.re": Tensor(G.real), "G.im": Tensor(G.imag)}
        report = grad_check(lambda t: prenet_forward(ComplexTensor(t["G.re"], t["G.im"]), params), inputs,
                            op="prenet_input")
        self.assertTrue(report.passed, report.summary())


if __name__ == "__main__":
    unittest.main()
