"""Adam with bias correction and parameter groups."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    """Step count plus first and second moments, aligned with a parameter list."""
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2,
              eps: float = EPSILON) -> Tuple[List[np.ndarray], AdamState]:
    """Pure Adam update: returns new parameters and a new state, inputs untouched.

    The first step with a constant gradient g moves each parameter by
    lr * g / (|g| + eps).
    """
    if len(state.m) != len(params):
        state = AdamState(state.step, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    step = state.step + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)


class Adam:
    """
    Adam over Tensor parameters, updated in place from their .grad.

    Each parameter group carries its own learning rate; the step count is
    shared. Parameters without a gradient in a step are left alone but their
    moments still decay, matching the functional form with a zero gradient.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = BETA1,
                 beta2: float = BETA2, eps: float = EPSILON):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.param_groups: List[Dict] = []
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}
        self.add_param_group(list(params), lr)

    def add_param_group(self, params: List[Tensor], lr: float) -> None:
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        seen = {id(p) for group in self.param_groups for p in group["params"]}
        params = [p for p in params if id(p) not in seen]
        self.param_groups.append({"params": params, "lr": lr})
        for p in params:
            self.m[id(p)] = np.zeros_like(p.data)
            self.v[id(p)] = np.zeros_like(p.data)

    def parameters(self) -> List[Tensor]:
        return [p for group in self.param_groups for p in group["params"]]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for group in self.param_groups:
            lr = group["lr"]
            for p in group["params"]:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m = self.m[id(p)]
                v = self.v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                if p.grad is None:
                    continue
                p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> Tuple[int, Dict[str, np.ndarray]]:
        """Step count and moments keyed '<param name>.m' / '<param name>.v'."""
        moments = {}
        for p in self.parameters():
            if not p.name:
                raise CheckpointError("optimizer state needs named parameters")
            moments[f"{p.name}.m"] = self.m[id(p)].copy()
            moments[f"{p.name}.v"] = self.v[id(p)].copy()
        return self.step_count, moments

    def load_state_dict(self, step: int, moments: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            for key, store in ((f"{p.name}.m", self.m), (f"{p.name}.v", self.v)):
                if key not in moments:
                    logger.warning("optimizer state has no entry %s; starting it from zero", key)
                    continue
                if moments[key].shape != p.data.shape:
                    raise CheckpointError(
                        f"optimizer entry {key} has shape {moments[key].shape}, parameter {p.data.shape}")
                store[id(p)] = np.array(moments[key], dtype=p.data.dtype)
        self.step_count = int(step)
