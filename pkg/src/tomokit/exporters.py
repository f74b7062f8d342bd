"""Writers for external plotting: .xyz point text and PNG slice renderings."""

import logging
import os
from typing import Iterable, List, Optional

import numpy as np
from PIL import Image

from .errors import ContainerError, ShapeError
from .geometry import TomoGeometry
from .simulator import PointCloud, ReflectivityVolume

logger = logging.getLogger(__name__)

XYZ_HEADER = "# x y z amplitude"
ORIENTATIONS = ("AE", "RE")


def write_xyz(path: str, cloud: PointCloud, header: bool = True) -> int:
    """Write one "x y z amplitude" line per point with round-trippable f64 text.

    Returns:
        Number of points written
    """
    table = np.column_stack([cloud.points, cloud.amplitudes]) if len(cloud) else np.zeros((0, 4))
    try:
        np.savetxt(path, table, fmt="%.17g", header=XYZ_HEADER[2:] if header else "", comments="# ")
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e
    logger.info("wrote %d points to %s", len(cloud), path)
    return len(cloud)


def read_xyz(path: str) -> PointCloud:
    try:
        table = np.loadtxt(path, ndmin=2, comments="#")
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise ContainerError(f"{path} is not an x y z amplitude table: {e}") from e
    if table.size == 0:
        return PointCloud.empty()
    if table.shape[1] != 4:
        raise ContainerError(f"{path}: expected 4 columns, found {table.shape[1]}")
    return PointCloud(table[:, :3], table[:, 3])


def export_volume_xyz(path: str, volume, geom: TomoGeometry, tau_rel: float = 0.1) -> int:
    """Voxels above tau_rel * max as an .xyz cloud at their bin centers."""
    from .evaluation import extract_point_cloud

    return write_xyz(path, extract_point_cloud(volume, geom, tau_rel))


def _volume_data(volume) -> np.ndarray:
    data = volume.data if isinstance(volume, ReflectivityVolume) else np.abs(np.asarray(volume))
    if data.ndim != 3:
        raise ShapeError(f"volume must be 3-D (range, azimuth, elevation), got {data.shape}")
    return data


def slice_image(volume, orientation: str, index: int, scale: Optional[float] = None) -> Image.Image:
    """8-bit grayscale rendering of one slice, elevation increasing upward.

    Args:
        volume: ReflectivityVolume or (ranges, azimuths, L) array
        orientation: AE (fixed range index, azimuth across) or RE (fixed azimuth index, range across)
        index: range index for AE, azimuth index for RE
        scale: value mapped to white (slice maximum when None)
    """
    data = _volume_data(volume)
    if orientation == "AE":
        plane = data[index]
    elif orientation == "RE":
        plane = data[:, index]
    else:
        raise ValueError(f"unknown orientation '{orientation}', expected one of {ORIENTATIONS}")
    plane = np.flipud(plane.T)
    top = float(plane.max()) if scale is None else float(scale)
    if top > 0:
        plane = np.clip(plane / top, 0.0, 1.0)
    return Image.fromarray(np.round(plane * 255.0).astype(np.uint8))


def export_slices(volume, out_dir: str, orientation: str = "AE",
                  indices: Optional[Iterable[int]] = None, max_size: int = 1024,
                  prefix: str = "slice") -> List[str]:
    """Save PNG renderings of the chosen slices, all on the volume-wide gray scale.

    Returns:
        Paths of the written files
    """
    data = _volume_data(volume)
    count = data.shape[0] if orientation == "AE" else data.shape[1]
    if indices is None:
        indices = range(count)
    scale = float(data.max()) or None
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for index in indices:
        if not 0 <= index < count:
            raise ShapeError(f"{orientation} slice {index} is outside 0..{count - 1}")
        image = slice_image(data, orientation, index, scale)
        if max(image.size) > max_size:
            ratio = max_size / max(image.size)
            image = image.resize((max(1, int(image.size[0] * ratio)), max(1, int(image.size[1] * ratio))),
                                 Image.LANCZOS)
        path = os.path.join(out_dir, f"{prefix}_{orientation.lower()}_{index:04d}.png")
        image.save(path, optimize=True)
        paths.append(path)
    logger.info("wrote %d %s slices to %s", len(paths), orientation, out_dir)
    return paths
