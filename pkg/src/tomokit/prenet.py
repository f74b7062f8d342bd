"""
Pre-imaging network: K unfolded shrinkage blocks mapping echo slices to reflectivity slices.

Block k computes Gamma_k = h_{theta_k}(W1_k G + W2_k Gamma_{k-1}) with Gamma_0 = 0,
column by column over the M columns of an (N, M) echo slice. Two
parameterizations are available:

    untied  every block learns its own complex W1 (L x N), W2 (L x L) and theta
    step    A stays fixed; block k learns a step mu_k and theta_k, with
            W1 = mu_k A^H and W2 = I - mu_k A^H A

Thresholds and steps are stored as softplus pre-activations so they stay
non-negative under any gradient update. Initialized from the steering
matrix, both variants reproduce K plain ISTA iterations.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from .autodiff import (SMOOTHING_EPS, ComplexTensor, Tensor, complex_abs, complex_add, complex_matmul,
                       complex_scale, complex_soft_threshold, inverse_softplus, no_grad, reshape,
                       softplus, transpose)
from .errors import CheckpointError, NonFiniteError, ShapeError
from .geometry import SteeringMatrix
from .simulator import EchoTensor
from .solvers import DEFAULT_STEP_FRACTION, spectral_norm_squared

logger = logging.getLogger(__name__)

DEFAULT_BLOCKS = 5
VARIANTS = ("untied", "step")
# softplus(-50) is about 2e-22, the stand-in for a zero threshold.
ZERO_LOGIT = -50.0


def _logit(value: float) -> float:
    return ZERO_LOGIT if value <= 0 else inverse_softplus(value)


@dataclass
class PreNetBlock:
    """Learnable tensors of one block; W1/W2 for untied, step_raw for the step variant."""
    theta_raw: Tensor
    W1: Optional[ComplexTensor] = None
    W2: Optional[ComplexTensor] = None
    step_raw: Optional[Tensor] = None

    @property
    def theta(self) -> Tensor:
        return softplus(self.theta_raw)

    @property
    def step(self) -> Tensor:
        return softplus(self.step_raw)


@dataclass
class PreNetParams:
    """All blocks plus what the forward pass needs besides them."""
    blocks: List[PreNetBlock]
    variant: str = "untied"
    n_baselines: int = 0
    elevation_bins: int = 0
    eps: float = SMOOTHING_EPS
    steering: Optional[np.ndarray] = None
    _constants: Dict[str, ComplexTensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("pre-imaging network needs at least one block")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown pre-imaging variant '{self.variant}', expected one of {VARIANTS}")
        if self.variant == "step" and self.steering is None:
            raise ValueError("the step variant needs the fixed steering matrix")

    @property
    def K(self) -> int:
        return len(self.blocks)

    def parameters(self) -> List[Tensor]:
        params = []
        for block in self.blocks:
            if block.W1 is not None:
                params.extend(block.W1.parts())
                params.extend(block.W2.parts())
            if block.step_raw is not None:
                params.append(block.step_raw)
            params.append(block.theta_raw)
        return params

    def parameter_count(self) -> int:
        """Number of real scalars that are learned."""
        return sum(p.size for p in self.parameters())

    def thresholds(self) -> np.ndarray:
        with no_grad():
            return np.array([float(block.theta.data) for block in self.blocks])

    def named_tensors(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in tensors:
                raise CheckpointError(f"checkpoint is missing {p.name}")
            value = np.asarray(tensors[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"{p.name} has shape {value.shape} in the checkpoint, "
                                      f"model expects {p.shape}")
            p.data = value.copy()

    def constant(self, key: str) -> ComplexTensor:
        """A^H and A^H A of the step variant, built once."""
        if key not in self._constants:
            AH = self.steering.conj().T
            value = AH if key == "AH" else AH @ self.steering
            self._constants[key] = ComplexTensor.from_array(value)
        return self._constants[key]


def prenet_init_from_geometry(A, mu0: Optional[float] = None, theta0: Optional[float] = None,
                              K: int = DEFAULT_BLOCKS, variant: str = "untied",
                              eps: float = SMOOTHING_EPS) -> PreNetParams:
    """ISTA-derived initialization: W1 = mu0 A^H, W2 = I - mu0 A^H A, theta = theta0 per block.

    Args:
        A: SteeringMatrix or (N, L) complex array
        mu0: step, default 0.9 / sigma_max(A)^2
        theta0: threshold applied by every block, default 0.01 * N
        K: number of blocks
        variant: "untied" or "step"
        eps: smoothing of the soft-threshold magnitude

    Returns:
        PreNetParams with independent tensors per block
    """
    entries = A.entries if isinstance(A, SteeringMatrix) else np.asarray(A)
    N, L = entries.shape
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if mu0 is None:
        mu0 = DEFAULT_STEP_FRACTION / spectral_norm_squared(entries)
    if theta0 is None:
        theta0 = 0.01 * N
    if not mu0 > 0 or theta0 < 0:
        raise ValueError(f"need mu0 > 0 and theta0 >= 0, got {mu0}, {theta0}")

    AH = entries.conj().T
    w1 = mu0 * AH
    w2 = np.eye(L) - mu0 * (AH @ entries)
    blocks = []
    for k in range(1, K + 1):
        prefix = f"prenet.block{k}"
        theta_raw = Tensor(np.array(_logit(theta0)), True, f"{prefix}.theta")
        if variant == "untied":
            blocks.append(PreNetBlock(theta_raw=theta_raw,
                                      W1=ComplexTensor.from_array(w1, True, f"{prefix}.W1"),
                                      W2=ComplexTensor.from_array(w2, True, f"{prefix}.W2")))
        else:
            blocks.append(PreNetBlock(theta_raw=theta_raw,
                                      step_raw=Tensor(np.array(inverse_softplus(mu0)), True, f"{prefix}.mu")))
    logger.debug("pre-imaging init: %s, K=%d, mu0=%.4g, theta0=%.4g", variant, K, mu0, theta0)
    return PreNetParams(blocks=blocks, variant=variant, n_baselines=N, elevation_bins=L, eps=eps,
                        steering=np.array(entries) if variant == "step" else None)


def _block_input(block: PreNetBlock, params: PreNetParams, G: ComplexTensor,
                 previous: Optional[ComplexTensor]) -> ComplexTensor:
    if params.variant == "untied":
        z = complex_matmul(block.W1, G)
        if previous is not None:
            z = complex_add(z, complex_matmul(block.W2, previous))
        return z
    step = block.step
    z = complex_scale(complex_matmul(params.constant("AH"), G), step)
    if previous is not None:
        correction = complex_scale(complex_matmul(params.constant("AHA"), previous), step)
        z = complex_add(z, ComplexTensor(previous.re - correction.re, previous.im - correction.im))
    return z


def prenet_forward(G: Union[ComplexTensor, np.ndarray], params: PreNetParams,
                   eps: Optional[float] = None) -> ComplexTensor:
    """Run all blocks on an (N, M) echo slice.

    Args:
        G: complex echo slice, one column per range-azimuth cell
        params: network parameters
        eps: soft-threshold smoothing (defaults to params.eps; 0 gives the exact threshold)

    Returns:
        (L, M) complex reflectivity slice
    """
    if not isinstance(G, ComplexTensor):
        G = ComplexTensor.from_array(np.asarray(G))
    if len(G.shape) != 2 or G.shape[0] != params.n_baselines:
        raise ShapeError(f"echo slice {G.shape} does not have {params.n_baselines} rows")
    eps = params.eps if eps is None else eps

    gamma = None
    for k, block in enumerate(params.blocks, start=1):
        try:
            gamma = complex_soft_threshold(_block_input(block, params, G, gamma), block.theta, eps)
        except NonFiniteError as e:
            raise NonFiniteError(f"pre-imaging block {k}: {e}") from e
    return gamma


def echo_columns(echoes: Union[EchoTensor, np.ndarray]) -> np.ndarray:
    """(N, R, A) echoes as (N, R*A) columns ordered range-major (column r*A + a)."""
    data = echoes.data if isinstance(echoes, EchoTensor) else np.asarray(echoes)
    if data.ndim != 3:
        raise ShapeError(f"echo tensor must be (baseline, range, azimuth), got {data.shape}")
    return data.reshape(data.shape[0], -1)


def pre_image_magnitude(echoes: Union[EchoTensor, np.ndarray], params: PreNetParams,
                        eps: Optional[float] = None) -> Tensor:
    """Differentiable |P(G)| as a (ranges, azimuths, L) tensor.

    Every azimuth-elevation slice (one per range index) goes through the same
    blocks; their columns are processed together.
    """
    data = echoes.data if isinstance(echoes, EchoTensor) else np.asarray(echoes)
    _, ranges, azimuths = data.shape
    columns = prenet_forward(echo_columns(data), params, eps)
    magnitude = complex_abs(columns)
    return reshape(transpose(magnitude, (1, 0)), (ranges, azimuths, params.elevation_bins))


def pre_image_volume(echoes: Union[EchoTensor, np.ndarray], params: PreNetParams,
                     eps: Optional[float] = None, slices_per_pass: Optional[int] = None) -> np.ndarray:
    """Complex (ranges, azimuths, L) volume from azimuth-elevation slices, without a graph.

    Args:
        echoes: (N, ranges, azimuths)
        params: network parameters
        eps: soft-threshold smoothing
        slices_per_pass: range slices evaluated together (all when None)
    """
    data = echoes.data if isinstance(echoes, EchoTensor) else np.asarray(echoes)
    n, ranges, azimuths = data.shape
    step = ranges if not slices_per_pass else slices_per_pass
    volume = np.empty((ranges, azimuths, params.elevation_bins), dtype=np.complex128)
    with no_grad():
        for start in range(0, ranges, step):
            stop = min(start + step, ranges)
            block = data[:, start:stop, :].reshape(n, -1)
            out = prenet_forward(block, params, eps).numpy()
            volume[start:stop] = out.T.reshape(stop - start, azimuths, params.elevation_bins)
    return volume
