"""
Point-cloud evaluation of reconstructed volumes.

A volume becomes a point cloud by thresholding at tau_rel times its maximum;
every surviving voxel contributes its bin-center coordinates. The cloud is
scored against the visible ground-truth scatterers with two nearest-neighbor
statistics:

    accuracy      over reconstructed points, distance to the nearest truth point
    completeness  over truth points, distance to the nearest reconstructed point

Both are in meters; lower is better.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import CheckpointError, MetricError
from .geometry import TomoGeometry, build_steering_matrix, elevation_to_xyz
from .prenet import pre_image_volume
from .simulator import DatasetRecord, PointCloud, ReflectivityVolume
from .solvers import SolverConfig, solve_volume

logger = logging.getLogger(__name__)

STATISTICS = ("mean", "median", "rms")
METHODS = ("fista", "ista", "unfolding", "proposed")
NETWORK_METHODS = ("unfolding", "proposed")


@dataclass
class MetricReport:
    """Completeness and accuracy of one reconstruction.

    An empty reconstruction scores completeness = inf and accuracy = nan.
    """
    completeness: float
    accuracy: float
    n_reconstructed: int
    n_truth: int
    tau_rel: Optional[float] = None
    statistic: str = "mean"


def extract_point_cloud(volume, geom: TomoGeometry, tau_rel: float = 0.1) -> PointCloud:
    """One point per voxel above tau_rel * max, at its bin center, carrying the voxel value.

    Args:
        volume: ReflectivityVolume or (ranges, azimuths, L) array of magnitudes
        geom: geometry the volume was imaged on
        tau_rel: relative threshold in (0, 1)
    """
    if not 0.0 < tau_rel < 1.0:
        raise MetricError(f"tau_rel must lie in (0, 1), got {tau_rel}")
    data = volume.data if isinstance(volume, ReflectivityVolume) else np.abs(np.asarray(volume))
    if data.ndim != 3 or data.shape[2] != geom.elevation_bins:
        raise MetricError(f"volume {data.shape} does not match {geom.elevation_bins} elevation bins")
    peak = float(data.max()) if data.size else 0.0
    if peak <= 0.0:
        return PointCloud.empty()
    r, a, l = np.nonzero(data > tau_rel * peak)
    s = geom.elevation_origin + l * geom.elevation_spacing
    x, y, z = elevation_to_xyz(geom, r, a, s)
    return PointCloud(np.stack([x, y, z], axis=1), data[r, a, l])


def nearest_distances(sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Euclidean distance from every source point to its nearest target point."""
    tree = cKDTree(targets)
    _, index = tree.query(sources, k=1)
    return np.sqrt(np.sum((sources - targets[index]) ** 2, axis=1))


def _statistic(distances: np.ndarray, statistic: str) -> float:
    if statistic == "mean":
        return float(np.mean(distances))
    if statistic == "median":
        return float(np.median(distances))
    if statistic == "rms":
        return float(np.sqrt(np.mean(distances ** 2)))
    raise MetricError(f"unknown statistic '{statistic}', expected one of {STATISTICS}")


def completeness_accuracy(reconstructed: PointCloud, truth: PointCloud,
                          statistic: str = "mean") -> MetricReport:
    """Nearest-neighbor completeness and accuracy of a reconstructed cloud.

    Raises:
        MetricError: empty truth cloud or unknown statistic
    """
    if statistic not in STATISTICS:
        raise MetricError(f"unknown statistic '{statistic}', expected one of {STATISTICS}")
    if len(truth) == 0:
        raise MetricError("ground-truth point cloud is empty")
    if len(reconstructed) == 0:
        logger.warning("reconstruction is empty; completeness is infinite")
        return MetricReport(math.inf, math.nan, 0, len(truth), statistic=statistic)
    accuracy = _statistic(nearest_distances(reconstructed.points, truth.points), statistic)
    completeness = _statistic(nearest_distances(truth.points, reconstructed.points), statistic)
    return MetricReport(completeness, accuracy, len(reconstructed), len(truth), statistic=statistic)


def evaluate_volume(volume, record: DatasetRecord, tau_rel: float = 0.1,
                    statistic: str = "mean") -> MetricReport:
    """Extract the cloud of a volume and score it against the record's visible scatterers."""
    cloud = extract_point_cloud(volume, record.geometry, tau_rel)
    report = completeness_accuracy(cloud, record.cloud, statistic)
    report.tau_rel = tau_rel
    return report


def reconstruct_record(record: DatasetRecord, method: str, model=None,
                       solver: Optional[SolverConfig] = None,
                       threads: Optional[int] = None) -> ReflectivityVolume:
    """Magnitude volume of one scene by a named method.

    Args:
        record: scene with echoes and geometry
        method: fista, ista, unfolding (pre-imaging only) or proposed (full network)
        model: TomoNet for the network methods
        solver: settings for the classical methods
        threads: worker cap for the classical methods
    """
    from .refine import full_forward

    if method not in METHODS:
        raise ValueError(f"unknown method '{method}', expected one of {METHODS}")
    if method in NETWORK_METHODS:
        if model is None:
            raise CheckpointError(f"method '{method}' needs a trained checkpoint")
        if method == "unfolding":
            volume = np.abs(pre_image_volume(record.echoes.data.astype(np.complex128), model.prenet))
            return ReflectivityVolume(volume, geometry_id=record.geometry.identifier)
        return full_forward(record.echoes, model)
    settings = solver or SolverConfig()
    cfg = SolverConfig(step=settings.step, threshold=settings.threshold, max_iters=settings.max_iters,
                       stop_tol=settings.stop_tol, variant=method)
    A = build_steering_matrix(record.geometry)
    return solve_volume(record.echoes, A, cfg, threads).magnitude


@dataclass
class ComparisonTable:
    """Per-scene metric reports for each method, in scene order."""
    methods: List[str]
    scenes: List[str] = field(default_factory=list)
    reports: Dict[Tuple[str, str], MetricReport] = field(default_factory=dict)

    def mean(self, method: str) -> Tuple[float, float]:
        """Mean (completeness, accuracy) of a method over all scenes."""
        rows = [self.reports[(scene, method)] for scene in self.scenes]
        return (float(np.mean([r.completeness for r in rows])),
                float(np.mean([r.accuracy for r in rows])))

    def header(self) -> List[str]:
        columns = ["scene"]
        for method in self.methods:
            columns.extend([f"{method}_completeness", f"{method}_accuracy"])
        return columns

    def rows(self) -> List[List[str]]:
        rows = []
        for scene in self.scenes:
            row = [scene]
            for method in self.methods:
                report = self.reports[(scene, method)]
                row.extend([repr(report.completeness), repr(report.accuracy)])
            rows.append(row)
        mean_row = ["mean"]
        for method in self.methods:
            mean_row.extend(repr(v) for v in self.mean(method))
        rows.append(mean_row)
        return rows

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.header())
            writer.writerows(self.rows())

    def to_text(self) -> str:
        """Aligned plain-text rendering with 4 decimals."""
        header = self.header()
        body = [[row[0]] + [f"{float(v):.4f}" for v in row[1:]] for row in self.rows()]
        widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w)
                           for i, (v, w) in enumerate(zip(row, widths)))
                 for row in [header] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def compare_methods(records: Sequence[DatasetRecord], indices: Sequence[int],
                    methods: Sequence[str] = ("fista", "proposed"), model=None,
                    solver: Optional[SolverConfig] = None, tau_rel: float = 0.1,
                    statistic: str = "mean", out_dir: Optional[str] = None,
                    threads: Optional[int] = None) -> ComparisonTable:
    """Score every method on the selected scenes; optionally write comparison.csv/.txt.

    Raises:
        CheckpointError: a network method without a model
    """
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method '{method}', expected one of {METHODS}")
        if method in NETWORK_METHODS and model is None:
            raise CheckpointError(f"method '{method}' needs a trained checkpoint")
    table = ComparisonTable(methods=list(methods))
    for i in indices:
        record = records[i]
        table.scenes.append(record.name)
        for method in methods:
            volume = reconstruct_record(record, method, model, solver, threads)
            report = evaluate_volume(volume, record, tau_rel, statistic)
            table.reports[(record.name, method)] = report
            logger.info("%s %s: completeness %.4f m, accuracy %.4f m (%d points)",
                        record.name, method, report.completeness, report.accuracy,
                        report.n_reconstructed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        table.write_csv(os.path.join(out_dir, "comparison.csv"))
        with open(os.path.join(out_dir, "comparison.txt"), "w", encoding="utf-8") as f:
            f.write(table.to_text())
    return table


def check_ordering(table: ComparisonTable, candidate: str = "proposed", baseline: str = "fista",
                   accuracy_slack: float = 0.25) -> Tuple[bool, str]:
    """Candidate mean completeness strictly below the baseline's, accuracy at most (1 + slack) times it."""
    cand_c, cand_a = table.mean(candidate)
    base_c, base_a = table.mean(baseline)
    better = cand_c < base_c
    close = cand_a <= (1.0 + accuracy_slack) * base_a
    message = (f"{candidate} completeness {cand_c:.4f} vs {baseline} {base_c:.4f} "
               f"({'better' if better else 'not better'}); accuracy {cand_a:.4f} vs {base_a:.4f} "
               f"({'within' if close else 'outside'} {accuracy_slack:.0%})")
    return better and close, message
