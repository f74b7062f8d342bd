"""
Tomographic dataset simulation.

Pipeline per scene:

1. sample_point_cloud: stratified jittered samples on every facet, each
   kept visible iff the facet faces the sensor and the ray from the sample
   toward the sensor hits no facet first (far field: one look direction per
   scene, the baseline span is negligible against R0)
2. voxelize_ground_truth: visible amplitudes accumulated into the nearest
   (range, azimuth, elevation) cell
3. synthesize_echoes: g_n = sum_p amp_p * exp(-j 4 pi b_n s_p / (wavelength R0))
   per cell with each point's continuous elevation, plus circular complex
   white noise at the requested SNR

Echoes and ground truth are built from the same in-grid points, so a point
outside the grid is dropped from both.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import SceneError, ShapeError
from .geometry import TomoGeometry, elevation_to_bin, steering_vectors, xyz_to_cell
from .scenes import FacetSet, SceneModel
from .utils import resolve_threads, spawn_seeds

logger = logging.getLogger(__name__)

NOISELESS = math.inf
DEFAULT_SNR_DB = 20.0
DEFAULT_DENSITY = 4.0

# Rays start this far (m) past the sample so they never re-hit a facet sharing its edge.
RAY_OFFSET = 1e-6
_RAY_CHUNK = 4096


@dataclass
class PointCloud:
    """Scatterer samples in scene coordinates.

    Attributes:
        points: (P, 3) coordinates in meters
        amplitudes: (P,) reflectivity amplitudes, >= 0
        visibility: (P,) True where the sensor sees the sample
    """
    points: np.ndarray
    amplitudes: np.ndarray
    visibility: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        if self.visibility is None:
            self.visibility = np.ones(len(self.amplitudes), dtype=bool)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if not (len(self.points) == len(self.amplitudes) == len(self.visibility)):
            raise ShapeError(
                f"point cloud arrays disagree: {len(self.points)} points, "
                f"{len(self.amplitudes)} amplitudes, {len(self.visibility)} flags")
        if np.any(self.amplitudes < 0):
            raise SceneError("point amplitudes must be >= 0")

    def __len__(self) -> int:
        return len(self.amplitudes)

    def visible(self) -> "PointCloud":
        """The sub-cloud the sensor sees (what echo synthesis consumes)."""
        mask = self.visibility
        return PointCloud(self.points[mask], self.amplitudes[mask], np.ones(int(mask.sum()), dtype=bool))

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=bool))


@dataclass
class EchoTensor:
    """Multi-baseline complex echoes indexed (baseline, range, azimuth)."""
    data: np.ndarray
    snr_db: float = NOISELESS
    geometry_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"echo tensor must be 3-D (baseline, range, azimuth), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise SceneError("echo tensor contains non-finite entries")

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.snr_db)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass
class ReflectivityVolume:
    """Real nonnegative reflectivity on the (range, azimuth, elevation) grid."""
    data: np.ndarray
    geometry_id: str = ""
    dropped_points: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3-D (range, azimuth, elevation), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise SceneError("volume contains non-finite entries")
        if np.any(self.data < 0):
            raise SceneError("volume entries must be >= 0")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass
class DatasetRecord:
    """Everything generated for one scene."""
    name: str
    geometry: TomoGeometry
    echoes: EchoTensor
    truth: ReflectivityVolume
    cloud: PointCloud
    metadata: Dict[str, float] = field(default_factory=dict)


@dataclass
class CellAssignment:
    """Nearest-cell indices of the in-grid points of a cloud."""
    range_idx: np.ndarray
    azimuth_idx: np.ndarray
    bin_idx: np.ndarray
    elevation: np.ndarray
    amplitudes: np.ndarray
    dropped: int


def look_direction(geom: TomoGeometry) -> np.ndarray:
    """Unit vector from the scene toward the sensor."""
    inc = geom.incidence
    return np.array([0.0, math.sin(inc), math.cos(inc)])


def sample_point_cloud(scene: SceneModel, geom: TomoGeometry, density: float = DEFAULT_DENSITY,
                       seed: int = 0) -> PointCloud:
    """Sample every facet at `density` points/m^2 and flag what the sensor sees.

    Args:
        scene: building scene
        geom: acquisition geometry (supplies the look direction)
        density: samples per square meter
        seed: sampling seed (int or numpy SeedSequence)

    Returns:
        PointCloud with all samples; visibility marks the unoccluded ones
    """
    if not density > 0:
        raise SceneError(f"density must be positive, got {density}")
    _check_spacing(scene, geom)
    facets = scene.facets()
    if len(facets) == 0:
        return PointCloud.empty()

    rng = np.random.default_rng(seed)
    points, amplitudes, owners = _sample_facets(facets, density, rng)
    if len(points) == 0:
        return PointCloud.empty()

    direction = look_direction(geom)
    facing = facets.normals[owners] @ direction > 1e-9
    visible = np.zeros(len(points), dtype=bool)
    candidates = np.flatnonzero(facing)
    if len(candidates):
        visible[candidates] = ~_occluded(points[candidates], direction, facets)
    logger.debug("scene %s: %d samples, %d visible", scene.name, len(points), int(visible.sum()))
    return PointCloud(points, amplitudes, visible)


def _check_spacing(scene: SceneModel, geom: TomoGeometry) -> None:
    expected = (geom.range_spacing, geom.azimuth_spacing)
    if not np.allclose(scene.cell_spacing, expected):
        raise SceneError(f"scene cell spacing {scene.cell_spacing} differs from geometry {expected}")


def _sample_facets(facets: FacetSet, density: float, rng: np.random.Generator):
    """Stratified jittered samples; counts are stochastically rounded density * area."""
    chunks, amps, owners = [], [], []
    areas = facets.areas
    for index in range(len(facets)):
        expected = density * areas[index]
        count = int(math.floor(expected + rng.random()))
        if count == 0:
            continue
        side = int(math.ceil(math.sqrt(count)))
        cells = rng.permutation(side * side)[:count]
        r1 = (cells // side + rng.random(count)) / side
        r2 = (cells % side + rng.random(count)) / side
        a, b, c = facets.vertices[index]
        root = np.sqrt(r1)[:, None]
        chunks.append((1 - root) * a + root * (1 - r2[:, None]) * b + root * r2[:, None] * c)
        amps.append(np.full(count, facets.amplitudes[index]))
        owners.append(np.full(count, index, dtype=np.int64))
    if not chunks:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(chunks), np.concatenate(amps), np.concatenate(owners)


def _occluded(points: np.ndarray, direction: np.ndarray, facets: FacetSet) -> np.ndarray:
    """Vectorized Moller-Trumbore test of rays points + t*direction (t > offset) against all facets."""
    v0 = facets.vertices[:, 0]
    e1 = facets.vertices[:, 1] - v0
    e2 = facets.vertices[:, 2] - v0
    pvec = np.cross(direction[None, :], e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    usable = np.abs(det) > 1e-12
    v0, e1, e2, pvec, det = v0[usable], e1[usable], e2[usable], pvec[usable], det[usable]
    inv_det = 1.0 / det

    hidden = np.zeros(len(points), dtype=bool)
    for start in range(0, len(points), _RAY_CHUNK):
        chunk = points[start:start + _RAY_CHUNK]
        tvec = chunk[:, None, :] - v0[None, :, :]
        u = np.einsum("cfk,fk->cf", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = (qvec @ direction) * inv_det
        t = np.einsum("cfk,fk->cf", qvec, e2) * inv_det
        hit = (u >= 0) & (v >= 0) & (u + v <= 1) & (t > RAY_OFFSET)
        hidden[start:start + _RAY_CHUNK] = hit.any(axis=1)
    return hidden


def assign_cells(cloud: PointCloud, geom: TomoGeometry, scene_dims: Tuple[int, int]) -> CellAssignment:
    """Nearest (range, azimuth, elevation) cell of every visible point inside the grid."""
    visible = cloud.visible()
    if len(visible) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return CellAssignment(empty, empty, empty, np.zeros(0), np.zeros(0), 0)
    range_f, azimuth_f, s = xyz_to_cell(geom, visible.points)
    r = np.floor(range_f + 0.5).astype(np.int64)
    a = np.floor(azimuth_f + 0.5).astype(np.int64)
    l = np.floor(elevation_to_bin(geom, s) + 0.5).astype(np.int64)
    inside = ((r >= 0) & (r < scene_dims[0]) & (a >= 0) & (a < scene_dims[1])
              & (l >= 0) & (l < geom.elevation_bins))
    dropped = int(len(inside) - inside.sum())
    return CellAssignment(r[inside], a[inside], l[inside], s[inside],
                          visible.amplitudes[inside], dropped)


def voxelize_ground_truth(cloud: PointCloud, geom: TomoGeometry,
                          scene_dims: Tuple[int, int]) -> ReflectivityVolume:
    """Accumulate visible amplitudes additively into their nearest grid cell."""
    cells = assign_cells(cloud, geom, scene_dims)
    if cells.dropped:
        logger.warning("dropped %d visible points outside the %s x %d grid",
                       cells.dropped, tuple(scene_dims), geom.elevation_bins)
    shape = (scene_dims[0], scene_dims[1], geom.elevation_bins)
    flat = np.ravel_multi_index((cells.range_idx, cells.azimuth_idx, cells.bin_idx), shape)
    data = np.bincount(flat, weights=cells.amplitudes, minlength=int(np.prod(shape))).reshape(shape)
    return ReflectivityVolume(data=data, geometry_id=geom.identifier, dropped_points=cells.dropped)


def synthesize_echoes(cloud: PointCloud, geom: TomoGeometry, snr_db: float = DEFAULT_SNR_DB,
                      scene_dims: Tuple[int, int] = (48, 48), seed: int = 0) -> EchoTensor:
    """Multi-baseline echoes of the visible in-grid points, with optional noise.

    Args:
        cloud: scatterers (only visible points contribute)
        geom: acquisition geometry
        snr_db: signal-to-noise ratio in dB, math.inf for noiseless
        scene_dims: (ranges, azimuths)
        seed: noise seed

    Returns:
        EchoTensor of shape (N, ranges, azimuths)
    """
    if math.isnan(snr_db):
        raise SceneError("snr_db must not be NaN")
    cells = assign_cells(cloud, geom, scene_dims)
    n_cells = scene_dims[0] * scene_dims[1]
    flat = cells.range_idx * scene_dims[1] + cells.azimuth_idx
    responses = steering_vectors(geom, cells.elevation) * cells.amplitudes[None, :]
    data = np.empty((geom.n_baselines, n_cells), dtype=np.complex128)
    for n in range(geom.n_baselines):
        data[n].real = np.bincount(flat, weights=responses[n].real, minlength=n_cells)
        data[n].imag = np.bincount(flat, weights=responses[n].imag, minlength=n_cells)

    if not math.isinf(snr_db):
        power = np.mean(np.abs(data) ** 2, axis=0)
        occupied = power > 0
        if occupied.any():
            signal_power = float(power[occupied].mean())
            sigma2 = signal_power / (10.0 ** (snr_db / 10.0))
            rng = np.random.default_rng(seed)
            noise = rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
            data = data + math.sqrt(sigma2 / 2.0) * noise
        else:
            logger.warning("scene has no signal; skipping noise at %.1f dB", snr_db)

    return EchoTensor(data=data.reshape(geom.n_baselines, *scene_dims), snr_db=snr_db,
                      geometry_id=geom.identifier)


def simulate_scene(scene: SceneModel, geom: TomoGeometry, snr_db: float = DEFAULT_SNR_DB,
                   density: float = DEFAULT_DENSITY, seed=0) -> DatasetRecord:
    """Run the three simulation steps for one scene."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    sample_seed, noise_seed = seed.spawn(2)
    cloud = sample_point_cloud(scene, geom, density, seed=sample_seed)
    dims = tuple(scene.scene_dims)
    truth = voxelize_ground_truth(cloud, geom, dims)
    echoes = synthesize_echoes(cloud, geom, snr_db, dims, seed=noise_seed)
    return DatasetRecord(name=scene.name, geometry=geom, echoes=echoes, truth=truth,
                         cloud=cloud.visible(),
                         metadata={"samples": float(len(cloud)),
                                   "visible": float(int(cloud.visibility.sum())),
                                   "dropped": float(truth.dropped_points)})


def make_split(count: int, seed: int) -> Dict[str, List[int]]:
    """Seeded train/val/test split: 2/3, 1/6 and the rest (12 scenes -> 8/2/2)."""
    order = np.random.default_rng(seed).permutation(count).tolist()
    n_train = max(1, int(round(count * 2 / 3))) if count else 0
    n_val = int(round(count / 6))
    n_val = min(n_val, count - n_train)
    return {"train": sorted(order[:n_train]),
            "val": sorted(order[n_train:n_train + n_val]),
            "test": sorted(order[n_train + n_val:])}


def generate_dataset(catalog: Sequence[SceneModel], geom: TomoGeometry, snr_db: float,
                     seed: int, path: str, density: float = DEFAULT_DENSITY,
                     threads: Optional[int] = None) -> List[DatasetRecord]:
    """Simulate every scene of a catalog and write the TSRD container plus split sidecar.

    Scenes are simulated in parallel, each with its own seed derived from `seed`;
    records are written in catalog order.

    Returns:
        The generated records
    """
    from .container import split_path, write_dataset, write_split

    if not catalog:
        raise SceneError("catalog is empty")
    seeds = spawn_seeds(seed, len(catalog))
    workers = min(resolve_threads(threads), len(catalog))
    logger.info("simulating %d scenes with %d workers", len(catalog), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(lambda args: simulate_scene(args[0], geom, snr_db, density, args[1]),
                                zip(catalog, seeds)))
    for record in records:
        logger.info("%s: %d visible points, echo %s, volume %s", record.name, len(record.cloud),
                    record.echoes.shape, record.truth.shape)

    write_dataset(path, records)
    write_split(split_path(path), make_split(len(records), seed))
    return records
