"""
Finite-difference verification of analytic gradients.

The output of the function under test is projected onto a fixed random
direction so a single backward pass yields the gradient of a scalar; each
sampled input entry is then perturbed by +/- step and the central difference
of the same scalar is compared to the analytic value.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .autodiff import ComplexTensor, Tensor, add, mul, no_grad, sum_
from .errors import GradientCheckError

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-4
# Gradients below this magnitude are compared in absolute terms.
DEFAULT_FLOOR = 1e-3

Inputs = Mapping[str, Tensor]
Sampler = Union[Inputs, Callable[[np.random.Generator], Inputs]]


@dataclass
class GradCheckReport:
    """Worst relative error per input tensor."""
    op: str
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    worst_index: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{self.op}: max rel err {self.max_error:.3e} (tolerance {self.tolerance:.1e})"]
        for name, error in self.errors.items():
            lines.append(f"  {name}: {error:.3e} at {self.worst_index[name]} "
                         f"({self.checked[name]} entries)")
        return "\n".join(lines)


def _parts(output) -> Tuple[Tensor, ...]:
    if isinstance(output, ComplexTensor):
        return output.parts()
    return (output,)


def grad_check(fn: Callable[[Inputs], Union[Tensor, ComplexTensor]], sampler: Sampler,
               op: str = "op", tolerance: float = DEFAULT_TOLERANCE, step: float = DEFAULT_STEP,
               seed: int = 0, max_entries: Optional[int] = None, floor: float = DEFAULT_FLOOR,
               raise_on_failure: bool = True) -> GradCheckReport:
    """Compare analytic gradients of `fn` with central differences.

    Args:
        fn: maps the named inputs to a Tensor or ComplexTensor
        sampler: named input tensors, or a callable drawing them from a numpy Generator
        op: label used in the report and in failures
        tolerance: largest accepted relative error
        step: finite-difference step
        seed: seeds the sampler, the projection and the entry subsampling
        max_entries: check at most this many entries per input (all when None)
        floor: denominator floor of the relative error
        raise_on_failure: raise GradientCheckError instead of returning a failing report

    Returns:
        GradCheckReport
    """
    rng = np.random.default_rng(seed)
    inputs = dict(sampler(rng) if callable(sampler) else sampler)
    for tensor in inputs.values():
        tensor.data = np.array(tensor.data, dtype=np.float64)
        tensor.requires_grad = True
        tensor.grad = None

    parts = _parts(fn(inputs))
    weights = [rng.standard_normal(p.shape) for p in parts]
    total = sum_(mul(parts[0], weights[0]))
    for part, weight in zip(parts[1:], weights[1:]):
        total = add(total, sum_(mul(part, weight)))
    total.backward()

    def projected() -> float:
        with no_grad():
            out = _parts(fn(inputs))
        return float(sum(np.sum(p.data * w) for p, w in zip(out, weights)))

    report = GradCheckReport(op=op, tolerance=tolerance)
    for name, tensor in inputs.items():
        flat = tensor.data.reshape(-1)
        analytic = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)).reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, worst_at = 0.0, 0
        for i in entries:
            original = flat[i]
            flat[i] = original + step
            plus = projected()
            flat[i] = original - step
            minus = projected()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            error = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
            if error > worst:
                worst, worst_at = error, int(i)
        index = tuple(int(v) for v in np.unravel_index(worst_at, tensor.shape)) if tensor.shape else ()
        report.errors[name] = worst
        report.worst_index[name] = index
        report.checked[name] = len(entries)

    logger.debug("%s", report.summary())
    if raise_on_failure and not report.passed:
        name = max(report.errors, key=report.errors.get)
        raise GradientCheckError(
            f"gradient check of {op} failed: input '{name}' index {report.worst_index[name]} "
            f"rel err {report.errors[name]:.3e} > {tolerance:.1e}")
    return report
