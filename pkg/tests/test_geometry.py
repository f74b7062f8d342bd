import math
import unittest

import numpy as np

from tomokit.errors import GeometryError
from tomokit.geometry import (DEFAULT_BASELINE_SPAN, DEFAULT_REFERENCE_RANGE, DEFAULT_WAVELENGTH,
                              TomoGeometry, build_steering_matrix, elevation_to_bin, elevation_to_xyz,
                              rayleigh_resolution, slant_incidence_consistency, steering_vectors,
                              unambiguous_extent, uniform_baselines, with_grid, xyz_to_cell)


class TestGeometry(unittest.TestCase):
    def setUp(self):
        self.geom = TomoGeometry()

    def test_default_steering_matrix_shape_and_modulus(self):
        A = build_steering_matrix(self.geom)
        self.assertEqual(A.shape, (11, 128))
        np.testing.assert_allclose(np.abs(A.entries), 1.0, atol=1e-12)
        self.assertEqual(A.geometry_id, self.geom.identifier)

    def test_reference_row_is_all_ones(self):
        A = build_steering_matrix(self.geom)
        np.testing.assert_array_equal(A.entries[0], np.ones(128))

    def test_phase_matches_scalar_formula(self):
        geom = TomoGeometry(elevation_origin=1.0)
        A = build_steering_matrix(geom)
        expected = -4.0 * math.pi * 1.9896 / (0.031 * 2040.3406)
        self.assertAlmostEqual(float(np.angle(A.entries[-1, 0] * np.exp(-1j * expected))), 0.0, places=10)

    def test_same_geometry_gives_identical_matrix(self):
        first = build_steering_matrix(TomoGeometry()).entries
        second = build_steering_matrix(TomoGeometry()).entries
        np.testing.assert_array_equal(first, second)

    def test_gram_diagonal_and_peak(self):
        A = build_steering_matrix(self.geom).entries
        gram = A.conj().T @ A
        np.testing.assert_allclose(np.diag(gram).real, 11.0, atol=1e-9)
        peaks = np.argmax(np.abs(gram), axis=0)
        np.testing.assert_array_equal(peaks, np.arange(128))

    def test_rejects_grid_beyond_unambiguous_extent(self):
        with self.assertRaises(GeometryError):
            TomoGeometry(elevation_bins=128, elevation_spacing=2.0)

    def test_rejects_bad_fields(self):
        with self.assertRaises(GeometryError):
            TomoGeometry(baselines=(0.0,))
        with self.assertRaises(GeometryError):
            TomoGeometry(elevation_bins=1)
        with self.assertRaises(GeometryError):
            TomoGeometry(wavelength=0.0)
        with self.assertRaises(GeometryError):
            TomoGeometry(baselines=(1.0, 1.0))

    def test_resolution_and_extent(self):
        rho = rayleigh_resolution(self.geom)
        self.assertAlmostEqual(rho, DEFAULT_WAVELENGTH * DEFAULT_REFERENCE_RANGE / (2 * DEFAULT_BASELINE_SPAN))
        doubled = TomoGeometry(baselines=uniform_baselines(11, 2 * DEFAULT_BASELINE_SPAN),
                               elevation_bins=64)
        self.assertAlmostEqual(rayleigh_resolution(doubled), rho / 2)
        extent = unambiguous_extent(self.geom)
        self.assertAlmostEqual(extent, DEFAULT_WAVELENGTH * DEFAULT_REFERENCE_RANGE / (2 * 0.19896), places=6)
        self.assertGreater(extent, 128.0)

    def test_elevation_to_xyz(self):
        x, y, z = elevation_to_xyz(self.geom, 5, 7, 0.0)
        self.assertEqual((x, y, z), (7.0, 5.0, 0.0))
        inc = math.radians(31.6453)
        _, y, z = elevation_to_xyz(self.geom, 0, 0, 10.0)
        self.assertAlmostEqual(z, 10.0 * math.sin(inc))
        self.assertAlmostEqual(y, -10.0 * math.cos(inc))
        vertical = TomoGeometry(incidence_deg=90.0, platform_height=None)
        self.assertAlmostEqual(elevation_to_xyz(vertical, 3, 3, 12.5)[2], 12.5)

    def test_xyz_round_trip_and_injective(self):
        s = np.linspace(0.0, 100.0, 11)
        x, y, z = elevation_to_xyz(self.geom, 4, 9, s)
        self.assertEqual(len(np.unique(np.round(z, 9))), len(s))
        range_f, azimuth_f, s_back = xyz_to_cell(self.geom, np.stack([x, y, z], axis=1))
        np.testing.assert_allclose(range_f, 4.0, atol=1e-9)
        np.testing.assert_allclose(azimuth_f, 9.0, atol=1e-9)
        np.testing.assert_allclose(s_back, s, atol=1e-9)
        np.testing.assert_allclose(elevation_to_bin(self.geom, s), s / self.geom.elevation_spacing)

    def test_steering_vectors_match_matrix_columns(self):
        A = build_steering_matrix(self.geom).entries
        np.testing.assert_allclose(steering_vectors(self.geom, 17.0), A[:, 17], atol=1e-12)

    def test_with_grid_changes_identifier(self):
        other = with_grid(self.geom, 64, 2.0)
        self.assertEqual(other.elevation_bins, 64)
        self.assertNotEqual(other.identifier, self.geom.identifier)

    def test_platform_height_mismatch_only_warns(self):
        self.assertLess(slant_incidence_consistency(self.geom), 1e-4)
        self.assertIsNone(slant_incidence_consistency(TomoGeometry(platform_height=None)))
        with self.assertLogs("tomokit.geometry", level="WARNING"):
            low = TomoGeometry(platform_height=100.0)
        self.assertGreater(slant_incidence_consistency(low), 1.0)


if __name__ == "__main__":
    unittest.main()
