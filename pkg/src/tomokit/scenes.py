"""
Parametric building scenes.

Buildings are described by a handful of primitives instead of CAD meshes:

- cuboid: rectangular footprint, flat roof
- gabled: rectangular footprint, walls up to the eaves, two roof slopes
  meeting at a ridge along x or y, triangular gable ends
- lshape: rectangular footprint with the (+x, +y) corner notched out, flat roof

Each primitive is converted into planar triangles (facets) with outward
normals and a reflectivity amplitude. The simulator samples those facets and
ray-casts them against each other for occlusion.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import SceneError

logger = logging.getLogger(__name__)

PRIMITIVE_KINDS = ("cuboid", "gabled", "lshape")

WALL_REFLECTIVITY = 1.0
ROOF_REFLECTIVITY = 0.7
GROUND_REFLECTIVITY = 0.3

# Facets smaller than this (m^2) are treated as degenerate and skipped.
MIN_FACET_AREA = 1e-9


@dataclass
class Primitive:
    """One building primitive.

    Attributes:
        kind: "cuboid", "gabled" or "lshape"
        position: (x, y) of the footprint's minimum corner in meters
        footprint: (width along x, depth along y) in meters
        height: wall height in meters (eave height for gabled roofs)
        wall_reflectivity: amplitude of wall samples
        roof_reflectivity: amplitude of roof samples
        ridge_height: gabled only, ridge height above the eaves
        ridge_axis: gabled only, "x" or "y"
        notch: lshape only, (width, depth) removed at the (+x, +y) corner
    """
    kind: str
    position: Tuple[float, float]
    footprint: Tuple[float, float]
    height: float
    wall_reflectivity: float = WALL_REFLECTIVITY
    roof_reflectivity: float = ROOF_REFLECTIVITY
    ridge_height: float = 0.0
    ridge_axis: str = "x"
    notch: Tuple[float, float] = (0.0, 0.0)

    @property
    def top(self) -> float:
        """Highest point of the primitive."""
        return self.height + (self.ridge_height if self.kind == "gabled" else 0.0)

    def bounds(self) -> Tuple[float, float, float, float]:
        x0, y0 = self.position
        return x0, y0, x0 + self.footprint[0], y0 + self.footprint[1]

    def validate(self) -> None:
        if self.kind not in PRIMITIVE_KINDS:
            raise SceneError(f"unknown primitive kind '{self.kind}', expected one of {PRIMITIVE_KINDS}")
        if self.footprint[0] <= 0 or self.footprint[1] <= 0:
            raise SceneError(f"{self.kind} footprint must be positive, got {self.footprint}")
        if self.height < 0 or self.ridge_height < 0:
            raise SceneError(f"{self.kind} heights must be >= 0")
        if self.wall_reflectivity < 0 or self.roof_reflectivity < 0:
            raise SceneError(f"{self.kind} reflectivities must be >= 0")
        if self.kind == "gabled" and self.ridge_axis not in ("x", "y"):
            raise SceneError(f"ridge_axis must be 'x' or 'y', got '{self.ridge_axis}'")
        if self.kind == "lshape":
            nx, ny = self.notch
            if not (0 < nx < self.footprint[0] and 0 < ny < self.footprint[1]):
                raise SceneError(f"lshape notch {self.notch} must lie strictly inside the footprint")


@dataclass
class SceneModel:
    """A scene: building primitives on an optional ground plane.

    The scene covers x in [0, azimuths * azimuth_spacing) and
    y in [0, ranges * range_spacing).
    """
    primitives: List[Primitive] = field(default_factory=list)
    ground_plane: bool = True
    ground_reflectivity: float = GROUND_REFLECTIVITY
    scene_dims: Tuple[int, int] = (48, 48)
    cell_spacing: Tuple[float, float] = (1.0, 1.0)
    name: str = "scene"

    @property
    def extent(self) -> Tuple[float, float]:
        """(x extent, y extent) in meters."""
        return (self.scene_dims[1] * self.cell_spacing[1],
                self.scene_dims[0] * self.cell_spacing[0])

    def validate(self) -> None:
        if self.scene_dims[0] < 1 or self.scene_dims[1] < 1:
            raise SceneError(f"scene_dims must be positive, got {self.scene_dims}")
        if self.cell_spacing[0] <= 0 or self.cell_spacing[1] <= 0:
            raise SceneError(f"cell_spacing must be positive, got {self.cell_spacing}")
        if self.ground_reflectivity < 0:
            raise SceneError("ground_reflectivity must be >= 0")
        width, depth = self.extent
        for index, primitive in enumerate(self.primitives):
            primitive.validate()
            x0, y0, x1, y1 = primitive.bounds()
            if x0 < 0 or y0 < 0 or x1 > width or y1 > depth:
                raise SceneError(
                    f"primitive {index} ({primitive.kind}) footprint {(x0, y0, x1, y1)} "
                    f"leaves the scene [0, {width}] x [0, {depth}]")

    def facets(self) -> "FacetSet":
        self.validate()
        builder = _FacetBuilder()
        for index, primitive in enumerate(self.primitives):
            builder.add_primitive(primitive, index)
        if self.ground_plane:
            width, depth = self.extent
            builder.add_polygon([(0, 0, 0), (width, 0, 0), (width, depth, 0), (0, depth, 0)],
                                (0, 0, 1), self.ground_reflectivity, -1, "ground")
        return builder.build()


@dataclass
class FacetSet:
    """Triangles of a scene, flattened into arrays.

    Attributes:
        vertices: (F, 3, 3) triangle corners
        normals: (F, 3) outward unit normals
        amplitudes: (F,) reflectivity amplitudes
        owners: (F,) primitive index, -1 for the ground plane
        kinds: facet kind per triangle ("wall", "roof", "ground")
    """
    vertices: np.ndarray
    normals: np.ndarray
    amplitudes: np.ndarray
    owners: np.ndarray
    kinds: List[str]

    def __len__(self) -> int:
        return len(self.amplitudes)

    @property
    def areas(self) -> np.ndarray:
        e1 = self.vertices[:, 1] - self.vertices[:, 0]
        e2 = self.vertices[:, 2] - self.vertices[:, 0]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


class _FacetBuilder:
    """Accumulates triangles while primitives are unfolded into facets."""

    def __init__(self):
        self.vertices = []
        self.normals = []
        self.amplitudes = []
        self.owners = []
        self.kinds = []

    def add_polygon(self, corners, outward, amplitude, owner, kind):
        """Fan-triangulate a convex planar polygon; its normal is oriented along `outward`."""
        corners = np.asarray(corners, dtype=np.float64)
        normal = np.cross(corners[1] - corners[0], corners[2] - corners[0])
        length = np.linalg.norm(normal)
        if length < 2 * MIN_FACET_AREA:
            return
        normal = normal / length
        if np.dot(normal, outward) < 0:
            normal = -normal
        for k in range(1, len(corners) - 1):
            triangle = np.stack([corners[0], corners[k], corners[k + 1]])
            area = 0.5 * np.linalg.norm(np.cross(triangle[1] - triangle[0], triangle[2] - triangle[0]))
            if area < MIN_FACET_AREA:
                continue
            self.vertices.append(triangle)
            self.normals.append(normal)
            self.amplitudes.append(float(amplitude))
            self.owners.append(owner)
            self.kinds.append(kind)

    def add_walls(self, footprint, height, amplitude, owner):
        """Vertical walls over a counter-clockwise footprint polygon."""
        count = len(footprint)
        for k in range(count):
            (px, py), (qx, qy) = footprint[k], footprint[(k + 1) % count]
            outward = (qy - py, -(qx - px), 0.0)
            self.add_polygon([(px, py, 0), (qx, qy, 0), (qx, qy, height), (px, py, height)],
                             outward, amplitude, owner, "wall")

    def add_primitive(self, primitive: Primitive, owner: int):
        x0, y0, x1, y1 = primitive.bounds()
        h = primitive.height
        walls, roof = primitive.wall_reflectivity, primitive.roof_reflectivity
        up = (0.0, 0.0, 1.0)

        if primitive.kind == "cuboid":
            self.add_walls([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], h, walls, owner)
            self.add_polygon([(x0, y0, h), (x1, y0, h), (x1, y1, h), (x0, y1, h)], up, roof, owner, "roof")

        elif primitive.kind == "lshape":
            nx, ny = primitive.notch
            xn, yn = x1 - nx, y1 - ny
            self.add_walls([(x0, y0), (x1, y0), (x1, yn), (xn, yn), (xn, y1), (x0, y1)], h, walls, owner)
            self.add_polygon([(x0, y0, h), (x1, y0, h), (x1, yn, h), (x0, yn, h)], up, roof, owner, "roof")
            self.add_polygon([(x0, yn, h), (xn, yn, h), (xn, y1, h), (x0, y1, h)], up, roof, owner, "roof")

        elif primitive.kind == "gabled":
            top = h + primitive.ridge_height
            self.add_walls([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], h, walls, owner)
            if primitive.ridge_axis == "x":
                ym = 0.5 * (y0 + y1)
                self.add_polygon([(x0, y0, h), (x1, y0, h), (x1, ym, top), (x0, ym, top)],
                                 (0, -1, 1), roof, owner, "roof")
                self.add_polygon([(x0, ym, top), (x1, ym, top), (x1, y1, h), (x0, y1, h)],
                                 (0, 1, 1), roof, owner, "roof")
                self.add_polygon([(x0, y0, h), (x0, y1, h), (x0, ym, top)], (-1, 0, 0), walls, owner, "wall")
                self.add_polygon([(x1, y0, h), (x1, y1, h), (x1, ym, top)], (1, 0, 0), walls, owner, "wall")
            else:
                xm = 0.5 * (x0 + x1)
                self.add_polygon([(x0, y0, h), (xm, y0, top), (xm, y1, top), (x0, y1, h)],
                                 (-1, 0, 1), roof, owner, "roof")
                self.add_polygon([(xm, y0, top), (x1, y0, h), (x1, y1, h), (xm, y1, top)],
                                 (1, 0, 1), roof, owner, "roof")
                self.add_polygon([(x0, y0, h), (x1, y0, h), (xm, y0, top)], (0, -1, 0), walls, owner, "wall")
                self.add_polygon([(x0, y1, h), (x1, y1, h), (xm, y1, top)], (0, 1, 0), walls, owner, "wall")

    def build(self) -> FacetSet:
        if not self.vertices:
            return FacetSet(np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0),
                            np.zeros(0, dtype=np.int64), [])
        return FacetSet(np.stack(self.vertices), np.stack(self.normals),
                        np.asarray(self.amplitudes), np.asarray(self.owners, dtype=np.int64),
                        list(self.kinds))


def random_catalog(count: int, scene_dims: Tuple[int, int], cell_spacing: Tuple[float, float],
                   incidence_deg: float, seed: int, max_buildings: int = 3,
                   height_range: Tuple[float, float] = (6.0, 24.0),
                   max_elevation: Optional[float] = None) -> List[SceneModel]:
    """Random building scenes varying in height, shape and layout.

    Buildings are placed so that their layover (height * cot(incidence) toward +y)
    stays inside the scene, and, if `max_elevation` is given, so that their top
    fits the elevation grid.
    """
    rng = np.random.default_rng(seed)
    width = scene_dims[1] * cell_spacing[1]
    depth = scene_dims[0] * cell_spacing[0]
    cot = 1.0 / math.tan(math.radians(incidence_deg))
    sin_inc = math.sin(math.radians(incidence_deg))
    h_low, h_high = height_range
    # keep roofs (ridge included) within roughly half the scene depth of layover
    h_high = min(h_high, 0.55 * depth / cot - 5.0)
    if max_elevation is not None:
        h_high = min(h_high, 0.95 * max_elevation * sin_inc - 5.0)
    if h_high <= 1.0:
        raise SceneError(f"scene of {scene_dims} cells is too small for buildings")
    if h_high <= h_low:
        h_low = 0.5 * h_high

    scenes = []
    for index in range(count):
        primitives: List[Primitive] = []
        target = int(rng.integers(1, max_buildings + 1))
        attempts = 0
        while len(primitives) < target and attempts < 200:
            attempts += 1
            candidate = _random_primitive(rng, width, depth, cot, h_low, h_high)
            if candidate is None:
                continue
            if any(_overlaps(candidate, other, margin=2.0) for other in primitives):
                continue
            primitives.append(candidate)
        scenes.append(SceneModel(primitives=primitives, scene_dims=tuple(scene_dims),
                                 cell_spacing=tuple(cell_spacing), name=f"scene_{index:03d}"))
    return scenes


def _random_primitive(rng, width, depth, cot, h_low, h_high) -> Optional[Primitive]:
    kind = PRIMITIVE_KINDS[int(rng.integers(len(PRIMITIVE_KINDS)))]
    fx = float(rng.uniform(0.15, 0.4) * width)
    fy = float(rng.uniform(0.1, 0.25) * depth)
    height = float(rng.uniform(h_low, h_high))
    ridge = float(rng.uniform(2.0, 5.0)) if kind == "gabled" else 0.0
    top = height + ridge
    # room needed on the sensor side for the layover of the roof
    y_max = depth - fy - top * cot - 1.0
    x_max = width - fx - 1.0
    if y_max <= 1.0 or x_max <= 1.0:
        return None
    x0 = float(rng.uniform(1.0, x_max))
    y0 = float(rng.uniform(1.0, y_max))
    primitive = Primitive(kind=kind, position=(x0, y0), footprint=(fx, fy), height=height,
                          ridge_height=ridge, ridge_axis="x" if rng.random() < 0.5 else "y")
    if kind == "lshape":
        primitive.notch = (float(rng.uniform(0.3, 0.6) * fx), float(rng.uniform(0.3, 0.6) * fy))
    return primitive


def _overlaps(a: Primitive, b: Primitive, margin: float) -> bool:
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    return not (ax1 + margin <= bx0 or bx1 + margin <= ax0 or ay1 + margin <= by0 or by1 + margin <= ay0)


def scenes_to_json(scenes: Sequence[SceneModel]) -> str:
    return json.dumps([asdict(scene) for scene in scenes], indent=2)


def scenes_from_json(text: str) -> List[SceneModel]:
    """Parse a catalog written by scenes_to_json."""
    try:
        raw: List[Dict[str, Any]] = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(f"catalog is not valid JSON: {e}") from e
    scenes = []
    for entry in raw:
        primitives = [Primitive(**{**p, "position": tuple(p["position"]),
                                   "footprint": tuple(p["footprint"]),
                                   "notch": tuple(p.get("notch", (0.0, 0.0)))})
                      for p in entry.get("primitives", [])]
        scene = SceneModel(primitives=primitives,
                           ground_plane=entry.get("ground_plane", True),
                           ground_reflectivity=entry.get("ground_reflectivity", GROUND_REFLECTIVITY),
                           scene_dims=tuple(entry["scene_dims"]),
                           cell_spacing=tuple(entry.get("cell_spacing", (1.0, 1.0))),
                           name=entry.get("name", "scene"))
        scene.validate()
        scenes.append(scene)
    return scenes
