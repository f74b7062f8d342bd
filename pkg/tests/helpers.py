"""Small geometries and hand-built records shared by the suites."""

import os

import numpy as np

from tomokit.geometry import TomoGeometry, build_steering_matrix, uniform_baselines
from tomokit.simulator import DatasetRecord, EchoTensor, PointCloud, ReflectivityVolume

SLOW_ENV = "TOMOKIT_RUN_SLOW"


def slow_enabled() -> bool:
    return os.environ.get(SLOW_ENV, "") == "1"


def orthogonal_geometry(n_baselines: int = 8, bins: int = 6) -> TomoGeometry:
    """Uniform baselines with bins one DFT step apart, so A^H A = N * I."""
    span = 0.2 * (n_baselines - 1)
    geom = TomoGeometry(baselines=uniform_baselines(n_baselines, span), elevation_bins=bins,
                        elevation_spacing=1.0, platform_height=None)
    extent = geom.wavelength * geom.reference_range / (2.0 * 0.2)
    return TomoGeometry(baselines=geom.baselines, elevation_bins=bins,
                        elevation_spacing=extent / n_baselines, platform_height=None)


def small_geometry(bins: int = 16, spacing: float = 4.0) -> TomoGeometry:
    """Default 11-baseline acquisition on a coarse elevation grid."""
    return TomoGeometry(elevation_bins=bins, elevation_spacing=spacing)


def spike_record(geom: TomoGeometry, ranges: int, azimuths: int, seed: int,
                 name: str = "spikes") -> DatasetRecord:
    """One unit scatterer with a random phase per cell, exactly on the grid, noiseless."""
    rng = np.random.default_rng(seed)
    A = build_steering_matrix(geom).entries
    bins = rng.integers(0, geom.elevation_bins, size=(ranges, azimuths))
    phases = np.exp(2j * np.pi * rng.random((ranges, azimuths)))
    truth = np.zeros((ranges, azimuths, geom.elevation_bins))
    echoes = np.zeros((geom.n_baselines, ranges, azimuths), dtype=np.complex128)
    for r in range(ranges):
        for a in range(azimuths):
            truth[r, a, bins[r, a]] = 1.0
            echoes[:, r, a] = A[:, bins[r, a]] * phases[r, a]
    points = np.array([[a, r, 0.0] for r in range(ranges) for a in range(azimuths)], dtype=np.float64)
    return DatasetRecord(name=name, geometry=geom,
                         echoes=EchoTensor(echoes, geometry_id=geom.identifier),
                         truth=ReflectivityVolume(truth, geometry_id=geom.identifier),
                         cloud=PointCloud(points, np.ones(len(points))))
