"""
Acquisition geometry, elevation grid and the tomographic steering matrix.

Coordinate frame shared by the simulator and the evaluator:

    x  azimuth (along track), cell j sits at x = j * azimuth_spacing
    y  ground range, cell i sits at y = i * range_spacing (at zero elevation)
    z  height above the flat ground

The sensor looks from the +y side, so the unit vector pointing from the
scene toward the sensor is u = (0, sin(inc), cos(inc)). Elevation s runs
perpendicular to the line of sight inside the incidence plane, along
e = (0, -cos(inc), sin(inc)). A point with elevation s in range cell i and
azimuth cell j therefore sits at

    (x, y, z) = (j * da, i * dr - s * cos(inc), s * sin(inc))

and the inverse used to bin scatterers is s = z / sin(inc),
i = (y + z * cot(inc)) / dr, j = x / da. Every point on the elevation
line of one cell has the same slant range, which is what makes layover.

The steering phase uses a negative exponent,

    A[n, l] = exp(-j * 4 * pi * b_n * s_l / (wavelength * R0))

and the simulator uses the same function, so forward model and inverters
always agree.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import GeometryError

logger = logging.getLogger(__name__)

# X-band carrier; the acquisition parameters below follow the 11-pass building setup.
DEFAULT_WAVELENGTH = 0.031
DEFAULT_REFERENCE_RANGE = 2040.3406
DEFAULT_INCIDENCE_DEG = 31.6453
DEFAULT_PLATFORM_HEIGHT = 1736.9668
DEFAULT_BASELINE_SPAN = 1.9896
DEFAULT_BASELINE_COUNT = 11


def uniform_baselines(count: int = DEFAULT_BASELINE_COUNT,
                      span: float = DEFAULT_BASELINE_SPAN) -> Tuple[float, ...]:
    """Exactly uniform perpendicular baselines over [0, span]."""
    if count < 2:
        raise GeometryError(f"need at least 2 baselines, got {count}")
    return tuple(float(b) for b in np.linspace(0.0, span, count))


@dataclass(frozen=True)
class TomoGeometry:
    """Multi-baseline acquisition and the elevation grid it is imaged on.

    Attributes:
        baselines: perpendicular baselines b_n in meters, reference pass first
        wavelength: carrier wavelength in meters
        reference_range: slant range R0 of the scene center in meters
        incidence_deg: incidence angle of the reference pass in degrees
        elevation_bins: number of elevation grid positions L
        elevation_spacing: grid step in meters
        elevation_origin: elevation of bin 0 in meters
        range_spacing: ground-range cell size in meters
        azimuth_spacing: azimuth cell size in meters
        platform_height: optional reference-track height, cross-checked against R0
    """
    baselines: Tuple[float, ...] = field(default_factory=uniform_baselines)
    wavelength: float = DEFAULT_WAVELENGTH
    reference_range: float = DEFAULT_REFERENCE_RANGE
    incidence_deg: float = DEFAULT_INCIDENCE_DEG
    elevation_bins: int = 128
    elevation_spacing: float = 1.0
    elevation_origin: float = 0.0
    range_spacing: float = 1.0
    azimuth_spacing: float = 1.0
    platform_height: Optional[float] = DEFAULT_PLATFORM_HEIGHT

    def __post_init__(self):
        object.__setattr__(self, "baselines", tuple(float(b) for b in self.baselines))
        if len(self.baselines) < 2:
            raise GeometryError(f"need at least 2 baselines, got {len(self.baselines)}")
        if not all(math.isfinite(b) for b in self.baselines):
            raise GeometryError("baselines must be finite")
        if self.elevation_bins < 2:
            raise GeometryError(f"need at least 2 elevation bins, got {self.elevation_bins}")
        for name in ("wavelength", "reference_range", "elevation_spacing",
                     "range_spacing", "azimuth_spacing"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise GeometryError(f"{name} must be positive, got {value}")
        if not (0.0 < self.incidence_deg <= 90.0):
            raise GeometryError(f"incidence_deg must lie in (0, 90], got {self.incidence_deg}")
        if self.max_adjacent_gap <= 0.0:
            raise GeometryError("baselines must contain at least two distinct values")

        span = self.elevation_bins * self.elevation_spacing
        extent = unambiguous_extent(self)
        if span > extent * (1.0 + 1e-12):
            raise GeometryError(
                f"elevation span {span:.3f} m exceeds the unambiguous extent {extent:.3f} m; "
                "reduce elevation_bins or elevation_spacing")

        mismatch = slant_incidence_consistency(self)
        if mismatch is not None and mismatch > 0.01:
            logger.warning(
                "platform height %.4f m disagrees with R0*cos(incidence) = %.4f m",
                self.platform_height, self.reference_range * math.cos(self.incidence))

    @property
    def n_baselines(self) -> int:
        return len(self.baselines)

    @property
    def incidence(self) -> float:
        """Incidence angle in radians."""
        return math.radians(self.incidence_deg)

    @property
    def baseline_span(self) -> float:
        return max(self.baselines) - min(self.baselines)

    @property
    def max_adjacent_gap(self) -> float:
        ordered = np.sort(np.asarray(self.baselines))
        return float(np.max(np.diff(ordered)))

    @property
    def identifier(self) -> str:
        """Stable short fingerprint, used as provenance link by echoes and steering matrices."""
        text = repr((self.baselines, self.wavelength, self.reference_range, self.incidence_deg,
                     self.elevation_bins, self.elevation_spacing, self.elevation_origin,
                     self.range_spacing, self.azimuth_spacing))
        return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]

    def elevations(self) -> np.ndarray:
        """Elevation of every grid bin, s_l = origin + l * spacing."""
        return self.elevation_origin + self.elevation_spacing * np.arange(self.elevation_bins)

    def phase_factor(self) -> float:
        """-4*pi / (wavelength * R0); multiply by b_n * s to get the steering phase."""
        return -4.0 * math.pi / (self.wavelength * self.reference_range)


@dataclass(frozen=True)
class SteeringMatrix:
    """Complex N x L forward operator; column l belongs to elevation bin l."""
    entries: np.ndarray
    geometry_id: str

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    @property
    def H(self) -> np.ndarray:
        """Conjugate transpose."""
        return self.entries.conj().T


def steering_vectors(geom: TomoGeometry, s) -> np.ndarray:
    """Phase responses for arbitrary (continuous) elevations.

    Args:
        geom: acquisition geometry
        s: elevation(s) in meters, any shape

    Returns:
        Complex array of shape (N,) + shape(s)
    """
    b = np.asarray(geom.baselines, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    phase = geom.phase_factor() * np.multiply.outer(b, s)
    return np.exp(1j * phase)


def build_steering_matrix(geom: TomoGeometry) -> SteeringMatrix:
    """Build A[n, l] = exp(-j 4 pi b_n s_l / (wavelength R0)) for the geometry's grid."""
    if not isinstance(geom, TomoGeometry):
        raise GeometryError(f"expected TomoGeometry, got {type(geom).__name__}")
    entries = steering_vectors(geom, geom.elevations())
    entries.setflags(write=False)
    return SteeringMatrix(entries=entries, geometry_id=geom.identifier)


def rayleigh_resolution(geom: TomoGeometry) -> float:
    """Classical elevation resolution wavelength * R0 / (2 * total baseline span)."""
    return geom.wavelength * geom.reference_range / (2.0 * geom.baseline_span)


def slant_incidence_consistency(geom: TomoGeometry) -> Optional[float]:
    """Relative gap between the platform height and R0 * cos(incidence), None when no height is set."""
    if geom.platform_height is None:
        return None
    expected = geom.reference_range * math.cos(geom.incidence)
    return abs(expected - geom.platform_height) / geom.platform_height


def unambiguous_extent(geom: TomoGeometry) -> float:
    """Alias-free elevation extent wavelength * R0 / (2 * largest adjacent baseline gap)."""
    return geom.wavelength * geom.reference_range / (2.0 * geom.max_adjacent_gap)


def elevation_to_xyz(geom: TomoGeometry, range_idx, azimuth_idx, s):
    """Map (range cell, azimuth cell, elevation) to scene coordinates in meters.

    Arguments broadcast against each other, so whole grids convert in one call.

    Returns:
        Tuple (x, y, z) of floats or arrays
    """
    inc = geom.incidence
    s = np.asarray(s, dtype=np.float64)
    x = np.asarray(azimuth_idx, dtype=np.float64) * geom.azimuth_spacing
    y = np.asarray(range_idx, dtype=np.float64) * geom.range_spacing - s * math.cos(inc)
    z = s * math.sin(inc)
    x, y, z = np.broadcast_arrays(x, y, z)
    if x.ndim == 0:
        return float(x), float(y), float(z)
    return x, y, z


def xyz_to_cell(geom: TomoGeometry, points: np.ndarray):
    """Inverse of elevation_to_xyz with continuous cell coordinates.

    Args:
        points: (P, 3) array of scene coordinates

    Returns:
        Tuple (range_f, azimuth_f, s) of (P,) arrays; round the first two to get cell indices
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inc = geom.incidence
    s = points[:, 2] / math.sin(inc)
    ground = points[:, 1] + s * math.cos(inc)
    return ground / geom.range_spacing, points[:, 0] / geom.azimuth_spacing, s


def elevation_to_bin(geom: TomoGeometry, s) -> np.ndarray:
    """Continuous bin coordinate of an elevation (bin centers are integers)."""
    return (np.asarray(s, dtype=np.float64) - geom.elevation_origin) / geom.elevation_spacing


def with_grid(geom: TomoGeometry, elevation_bins: int, elevation_spacing: float,
              elevation_origin: float = 0.0) -> TomoGeometry:
    """Copy of a geometry on another elevation grid (validated again)."""
    return TomoGeometry(
        baselines=geom.baselines, wavelength=geom.wavelength,
        reference_range=geom.reference_range, incidence_deg=geom.incidence_deg,
        elevation_bins=elevation_bins, elevation_spacing=elevation_spacing,
        elevation_origin=elevation_origin, range_spacing=geom.range_spacing,
        azimuth_spacing=geom.azimuth_spacing, platform_height=geom.platform_height)

