"""
Classical compressive-sensing inverters for one range-azimuth cell at a time.

Both solvers minimize 0.5 * ||A x - g||^2 + theta * ||x||_1 with the proximal
gradient step x <- h_{mu*theta}(x - mu * A^H (A x - g)); FISTA adds Nesterov
momentum. Columns of a (N, M) echo matrix are solved together but each column
keeps its own threshold, iteration count and stopping decision, so a batched
solve gives the same per-column result as a loop over columns.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .geometry import SteeringMatrix
from .simulator import EchoTensor, ReflectivityVolume
from .utils import resolve_threads

logger = logging.getLogger(__name__)

VARIANTS = ("ista", "fista")
DEFAULT_STEP_FRACTION = 0.9
DEFAULT_THRESHOLD_FRACTION = 0.05
POWER_ITERATIONS = 50

# Columns per work item in solve_volume; fixed so results do not depend on the thread count.
_COLUMN_CHUNK = 1024


@dataclass
class SolverConfig:
    """Solver hyperparameters.

    Attributes:
        step: gradient step mu; None means 0.9 / sigma_max(A)^2
        threshold: L1 weight theta; None means 0.05 * max|A^H g| per column
        max_iters: iteration cap
        stop_tol: stop when ||x_k - x_{k-1}|| <= stop_tol * ||x_k||
        variant: "ista" or "fista"
        record_objective: keep the objective value after every iteration
    """
    step: Optional[float] = None
    threshold: Optional[float] = None
    max_iters: int = 1000
    stop_tol: float = 1e-6
    variant: str = "fista"
    record_objective: bool = False

    def __post_init__(self):
        if self.step is not None and not (math.isfinite(self.step) and self.step > 0):
            raise ConfigError(f"solver step must be positive, got {self.step}")
        if self.threshold is not None and not (math.isfinite(self.threshold) and self.threshold >= 0):
            raise ConfigError(f"solver threshold must be >= 0, got {self.threshold}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.stop_tol >= 0:
            raise ConfigError(f"stop_tol must be >= 0, got {self.stop_tol}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown solver variant '{self.variant}', expected one of {VARIANTS}")


@dataclass
class FistaState:
    """FISTA iterate, momentum point and step-size sequence value (t_1 = 1)."""
    estimate: np.ndarray
    momentum: np.ndarray
    t: float = 1.0


@dataclass
class SolverResult:
    """Estimate with per-column iteration counts and, optionally, the objective trace.

    For a single echo vector `estimate` is (L,) and `iterations` an int;
    for an (N, M) matrix they are (L, M) and (M,).
    """
    estimate: np.ndarray
    iterations: Union[int, np.ndarray]
    objective: List[np.ndarray] = field(default_factory=list)


@dataclass
class VolumeSolution:
    """Result of solving every column of a scene."""
    magnitude: ReflectivityVolume
    complex_volume: np.ndarray
    iterations: np.ndarray


def next_t(t: float) -> float:
    """FISTA step-size recurrence t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2."""
    return (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0


def soft_threshold(z, theta):
    """Complex soft thresholding (z / |z|) * max(|z| - theta, 0), with 0 at z = 0.

    Args:
        z: complex scalar or array
        theta: threshold >= 0, scalar or broadcastable to z

    Returns:
        Array (or scalar) with magnitudes shrunk by theta and phases kept
    """
    z = np.asarray(z)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("soft threshold requires theta >= 0")
    magnitude = np.abs(z)
    shrunk = np.maximum(magnitude - theta, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(magnitude > 0, shrunk / np.where(magnitude > 0, magnitude, 1.0), 0.0)
    out = z * scale
    return out[()] if out.ndim == 0 else out


def spectral_norm_squared(A, iterations: int = POWER_ITERATIONS) -> float:
    """Largest eigenvalue of A^H A (sigma_max(A)^2) by power iteration.

    The start vector is fixed, so the estimate is deterministic.
    """
    entries = _entries(A)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(entries.shape[1]) + 1j * rng.standard_normal(entries.shape[1])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(iterations):
        w = entries.conj().T @ (entries @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        value = float(np.linalg.norm(entries @ v) ** 2)
    return value


def default_step(A) -> float:
    """0.9 / sigma_max(A)^2."""
    return DEFAULT_STEP_FRACTION / spectral_norm_squared(A)


def default_threshold(g: np.ndarray, A) -> np.ndarray:
    """Scale-free per-column threshold 0.05 * max|A^H g|."""
    g = np.asarray(g)
    correlation = _entries(A).conj().T @ g
    return DEFAULT_THRESHOLD_FRACTION * np.max(np.abs(correlation), axis=0)


def objective(A, g: np.ndarray, x: np.ndarray, theta) -> np.ndarray:
    """0.5 * ||A x - g||^2 + theta * ||x||_1, per column."""
    residual = _entries(A) @ x - g
    return 0.5 * np.sum(np.abs(residual) ** 2, axis=0) + np.asarray(theta) * np.sum(np.abs(x), axis=0)


def ista_reconstruct(g: np.ndarray, A, cfg: Optional[SolverConfig] = None) -> SolverResult:
    """ISTA from x_0 = 0 until max_iters or the relative change drops below stop_tol.

    Args:
        g: echoes, (N,) or (N, M) for M independent columns
        A: SteeringMatrix or (N, L) complex array
        cfg: solver settings (variant is ignored)

    Returns:
        SolverResult with the last iterate
    """
    return _solve(g, A, cfg or SolverConfig(variant="ista"), accelerate=False)


def fista_reconstruct(g: np.ndarray, A, cfg: Optional[SolverConfig] = None) -> SolverResult:
    """FISTA: the ISTA step taken at the momentum point, then the momentum update."""
    return _solve(g, A, cfg or SolverConfig(variant="fista"), accelerate=True)


def reconstruct(g: np.ndarray, A, cfg: SolverConfig) -> SolverResult:
    """Dispatch on cfg.variant."""
    return _solve(g, A, cfg, accelerate=cfg.variant == "fista")


def fista_step(state: FistaState, A: np.ndarray, g: np.ndarray, step: float, threshold) -> FistaState:
    """One FISTA iteration on a state; works column-wise on (L, M) estimates."""
    gradient = A.conj().T @ (A @ state.momentum - g)
    estimate = soft_threshold(state.momentum - step * gradient, step * threshold)
    t = next_t(state.t)
    momentum = estimate + ((state.t - 1.0) / t) * (estimate - state.estimate)
    return FistaState(estimate=estimate, momentum=momentum, t=t)


def _entries(A) -> np.ndarray:
    if isinstance(A, SteeringMatrix):
        return A.entries
    return np.asarray(A)


def _prepare(g: np.ndarray, A, cfg: SolverConfig):
    entries = _entries(A)
    g = np.asarray(g)
    single = g.ndim == 1
    columns = g[:, None] if single else g
    if columns.ndim != 2 or columns.shape[0] != entries.shape[0]:
        raise ShapeError(f"echoes {g.shape} do not conform to steering matrix {entries.shape}")
    if not np.all(np.isfinite(columns)):
        raise NonFiniteError("solver input contains non-finite echoes")
    columns = columns.astype(np.complex128, copy=False)

    sigma2 = spectral_norm_squared(entries)
    step = cfg.step if cfg.step is not None else (DEFAULT_STEP_FRACTION / sigma2 if sigma2 > 0 else 1.0)
    if sigma2 > 0 and step * sigma2 > 1.0 + 1e-9:
        logger.warning("step %.4g exceeds 1/sigma_max^2 = %.4g; ISTA may not decrease monotonically",
                       step, 1.0 / sigma2)
    if cfg.threshold is None:
        threshold = default_threshold(columns, entries)
    else:
        threshold = np.full(columns.shape[1], float(cfg.threshold))
    return entries, columns, single, step, threshold


def _solve(g: np.ndarray, A, cfg: SolverConfig, accelerate: bool) -> SolverResult:
    entries, columns, single, step, threshold = _prepare(g, A, cfg)
    L, M = entries.shape[1], columns.shape[1]
    AH = entries.conj().T

    x = np.zeros((L, M), dtype=np.complex128)
    y = x.copy()
    t = np.ones(M)
    active = np.ones(M, dtype=bool)
    iterations = np.zeros(M, dtype=np.int64)
    trace = []

    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        base = y[:, idx] if accelerate else x[:, idx]
        gradient = AH @ (entries @ base - columns[:, idx])
        x_new = soft_threshold(base - step * gradient, step * threshold[idx])
        if accelerate:
            t_new = (1.0 + np.sqrt(1.0 + 4.0 * t[idx] ** 2)) / 2.0
            y[:, idx] = x_new + ((t[idx] - 1.0) / t_new) * (x_new - x[:, idx])
            t[idx] = t_new

        change = np.linalg.norm(x_new - x[:, idx], axis=0)
        scale = np.linalg.norm(x_new, axis=0)
        x[:, idx] = x_new
        iterations[idx] += 1
        active[idx[change <= cfg.stop_tol * scale]] = False
        if cfg.record_objective:
            trace.append(objective(entries, columns, x, threshold))

    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=0))[0])
        raise NonFiniteError(f"solver diverged in column {bad}")
    if single:
        return SolverResult(estimate=x[:, 0], iterations=int(iterations[0]),
                            objective=[float(v[0]) for v in trace])
    return SolverResult(estimate=x, iterations=iterations, objective=trace)


def solve_volume(echoes: EchoTensor, A, cfg: Optional[SolverConfig] = None,
                 threads: Optional[int] = None) -> VolumeSolution:
    """Apply the configured solver to every (range, azimuth) column independently.

    Args:
        echoes: (N, ranges, azimuths) echo tensor
        A: steering matrix of the geometry the echoes were taken with
        cfg: solver settings
        threads: worker cap (see utils.resolve_threads)

    Returns:
        VolumeSolution with |x| as a ReflectivityVolume, the complex volume and iteration counts
    """
    cfg = cfg or SolverConfig()
    entries = _entries(A)
    data = echoes.data if isinstance(echoes, EchoTensor) else np.asarray(echoes)
    n, ranges, azimuths = data.shape
    if n != entries.shape[0]:
        raise ShapeError(f"echo tensor {data.shape} has {n} baselines, steering matrix {entries.shape}")
    finite = np.all(np.isfinite(data), axis=0)
    if not finite.all():
        r, a = np.argwhere(~finite)[0]
        raise NonFiniteError(f"non-finite echoes at range {r}, azimuth {a}")

    columns = data.reshape(n, ranges * azimuths)
    chunks: List[Tuple[int, int]] = [(start, min(start + _COLUMN_CHUNK, columns.shape[1]))
                                     for start in range(0, columns.shape[1], _COLUMN_CHUNK)]

    def run(bounds):
        start, stop = bounds
        try:
            return reconstruct(columns[:, start:stop], entries, cfg)
        except NonFiniteError as e:
            r, a = divmod(start, azimuths)
            raise NonFiniteError(f"{e} (chunk starting at range {r}, azimuth {a})") from e

    workers = min(resolve_threads(threads), len(chunks))
    logger.info("%s over %d x %d cells with %d workers", cfg.variant, ranges, azimuths, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, chunks))

    estimate = np.concatenate([r.estimate for r in results], axis=1)
    iterations = np.concatenate([r.iterations for r in results])
    volume = estimate.T.reshape(ranges, azimuths, entries.shape[1])
    geometry_id = A.geometry_id if isinstance(A, SteeringMatrix) else ""
    return VolumeSolution(magnitude=ReflectivityVolume(np.abs(volume), geometry_id=geometry_id),
                          complex_volume=volume, iterations=iterations.reshape(ranges, azimuths))
