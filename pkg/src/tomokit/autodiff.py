"""
Minimal reverse-mode differentiation over numpy arrays.

Every op builds its output Tensor together with a closure that maps the
output gradient to the gradients of its parents. Tensor.backward() orders
the graph topologically, visits each node once and sums gradients that
reach a node along several paths. Complex values are carried as a pair of
real tensors (ComplexTensor); the complex ops below are compositions of
real ops plus two fused kernels (shrink factor, magnitude).
"""

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError

# Smoothing added under the square root of the complex soft threshold during training.
SMOOTHING_EPS = 1e-8

_grad_state = threading.local()

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Within the block, ops record no graph (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _as_array(data) -> np.ndarray:
    array = np.asarray(data)
    if np.iscomplexobj(array):
        raise TypeError("Tensor holds real values; use ComplexTensor for complex data")
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    return array


class Tensor:
    """Real array with an optional gradient and the op that produced it.

    Args:
        data: array-like of real values
        requires_grad: accumulate a gradient for this tensor in backward()
        name: parameter name used by checkpoints and gradient reports
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Backward] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def _topological_order(self) -> List["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) * grad into every leaf that requires a gradient.

        Args:
            grad: upstream gradient; may be omitted for single-element tensors
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require a gradient")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a gradient needs one element, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        pending = {id(self): grad}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operator sugar; the functions below are the actual graph ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    return _result(np.abs(a.data), "abs", (a,), lambda g: (np.sign(a.data) * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0.0), "relu", (a,), lambda g: (g * positive,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the whole gradient goes to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    first = a.data >= b.data
    return _result(np.where(first, a.data, b.data), "maximum", (a, b),
                   lambda g: (unbroadcast(g * first, a.shape), unbroadcast(g * ~first, b.shape)))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    value = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sigmoid = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                       np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _result(value, "softplus", (a,), lambda g: (g * sigmoid,))


def inverse_softplus(value: float) -> float:
    """Pre-activation that softplus maps to `value` (> 0)."""
    return float(value + np.log(-np.expm1(-value)))


# --- reductions and shape ops ------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(a, key) -> Tensor:
    """a[key] for basic or integer-array keys; repeated indices accumulate in backward."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], "index", (a,), backward)


def take(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; used for reflect padding."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(a.data, indices, axis=axis), "take", (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# --- complex values ----------------------------------------------------------

@dataclass
class ComplexTensor:
    """Complex tensor as a pair of real tensors of equal shape."""
    re: Tensor
    im: Tensor

    def __post_init__(self):
        self.re = as_tensor(self.re)
        self.im = as_tensor(self.im)
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real part {self.re.shape} and imaginary part {self.im.shape} differ")

    @classmethod
    def from_array(cls, z, requires_grad: bool = False, name: Optional[str] = None) -> "ComplexTensor":
        z = np.asarray(z)
        re_name = f"{name}.re" if name else None
        im_name = f"{name}.im" if name else None
        return cls(Tensor(z.real.astype(np.float64), requires_grad, re_name),
                   Tensor(np.array(z.imag, dtype=np.float64), requires_grad, im_name))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def parts(self) -> Tuple[Tensor, Tensor]:
        return self.re, self.im


def complex_matmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """(ar + j ai)(br + j bi) from four real matrix products."""
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"complex_matmul shapes do not conform: {a.shape} @ {b.shape}")
    re = sub(matmul(a.re, b.re), matmul(a.im, b.im))
    im = add(matmul(a.re, b.im), matmul(a.im, b.re))
    return ComplexTensor(re, im)


def complex_add(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    if a.shape != b.shape:
        raise ShapeError(f"complex_add shapes differ: {a.shape} vs {b.shape}")
    return ComplexTensor(add(a.re, b.re), add(a.im, b.im))


def complex_scale(a: ComplexTensor, factor) -> ComplexTensor:
    """Multiply both parts by a real tensor or scalar."""
    return ComplexTensor(mul(a.re, factor), mul(a.im, factor))


def shrink_factor(re, im, theta, eps: float = SMOOTHING_EPS) -> Tensor:
    """s = max(m - theta, 0) / m with m = sqrt(re^2 + im^2 + eps); s = 0 where m = 0."""
    re, im, theta = as_tensor(re), as_tensor(im), as_tensor(theta)
    if eps < 0:
        raise ValueError(f"smoothing eps must be >= 0, got {eps}")
    m = np.sqrt(re.data ** 2 + im.data ** 2 + eps)
    active = m > theta.data
    safe_m = np.where(active, m, 1.0)
    s = np.where(active, (m - theta.data) / safe_m, 0.0)

    def backward(g):
        # ds/dm = theta / m^2 and ds/dtheta = -1 / m on the active set, 0 elsewhere.
        ds_dm = np.where(active, theta.data / safe_m ** 2, 0.0)
        dm = g * ds_dm / safe_m
        d_theta = np.where(active, -g / safe_m, 0.0)
        return dm * re.data, dm * im.data, unbroadcast(d_theta, theta.shape)

    return _result(s, "complex_soft_threshold", (re, im, theta), backward)


def complex_soft_threshold(z: ComplexTensor, theta, eps: float = SMOOTHING_EPS) -> ComplexTensor:
    """z * max(m - theta, 0) / m with the smoothed magnitude m; gradients reach z and theta."""
    s = shrink_factor(z.re, z.im, theta, eps)
    return ComplexTensor(mul(z.re, s), mul(z.im, s))


def complex_abs(z: ComplexTensor) -> Tensor:
    """Exact magnitude sqrt(re^2 + im^2), gradient 0 at the origin."""
    m = np.sqrt(z.re.data ** 2 + z.im.data ** 2)
    nonzero = m > 0
    safe_m = np.where(nonzero, m, 1.0)

    def backward(g):
        scale = np.where(nonzero, g / safe_m, 0.0)
        return scale * z.re.data, scale * z.im.data

    return _result(m, "complex_abs", (z.re, z.im), backward)


def parameters_of(values: Sequence[Union[Tensor, ComplexTensor]]) -> List[Tensor]:
    """Flatten tensors and complex tensors into the list of real leaves."""
    flat = []
    for value in values:
        if isinstance(value, ComplexTensor):
            flat.extend(value.parts())
        else:
            flat.append(value)
    return flat
