"""Adam with bias correction and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError, UsageError
from .nn import ParameterStore


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState, lr: float) -> None:
    """One Adam update using the ``grad`` slot of every parameter.

    Parameters are replaced by fresh tensors; ``state`` is updated in place.
    """
    grads = {}
    for path in params:
        g = params[path].grad
        if g is None:
            raise OptimizerError(f"no gradient for parameter {path!r}")
        grads[path] = g
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for path, g in grads.items():
        m = state.m.get(path)
        v = state.v.get(path)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[path], state.v[path] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[path] = params[path].data - update


def cosine_lr(step: int, total_steps: int, lr_start: float = 1e-4, lr_end: float = 1e-5) -> float:
    """Cosine annealing from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))
