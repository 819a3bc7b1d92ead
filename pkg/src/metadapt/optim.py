"""SGD, bias-corrected Adam, and the step-decay learning-rate schedule.

Optimizers mutate parameter tensors in place (``t.data``) and never touch
gradient arrays. Adam keeps one moment pair per parameter name; batch-norm
running statistics are not parameters and never pass through here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .errors import DimensionError, InputError, StateError
from .network import ParameterSet
from .tensor import GradientMap


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def named_arrays(self, prefix: str = "adam") -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name in sorted(self.m):
            out[f"{prefix}.m:{name}"] = self.m[name]
            out[f"{prefix}.v:{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], t: int,
                    prefix: str = "adam") -> "AdamState":
        state = cls(t=t)
        mtag, vtag = f"{prefix}.m:", f"{prefix}.v:"
        for key, arr in arrays.items():
            if key.startswith(mtag):
                state.m[key[len(mtag):]] = np.asarray(arr, dtype=np.float64).copy()
            elif key.startswith(vtag):
                state.v[key[len(vtag):]] = np.asarray(arr, dtype=np.float64).copy()
        if set(state.m) != set(state.v):
            raise StateError("adam state: m and v parameter names disagree")
        return state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    factor: float = 0.2
    interval: int = 5

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InputError(f"schedule: base_lr must be positive, got {self.base_lr}")
        if not 0.0 < self.factor <= 1.0:
            raise InputError(f"schedule: factor must be in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise InputError(f"schedule: interval must be >= 1, got {self.interval}")


def schedule_lr(sched: LrSchedule, epoch: int) -> float:
    """base_lr * factor ** floor(epoch / interval)."""
    if epoch < 0:
        raise InputError(f"schedule: epoch must be >= 0, got {epoch}")
    return sched.base_lr * sched.factor ** (epoch // sched.interval)


def sgd_step(params: ParameterSet, grads: GradientMap, lr: float) -> None:
    """p <- p - lr * g for every parameter named in ``grads``."""
    if lr <= 0:
        raise InputError(f"sgd: lr must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params.tensors:
            raise StateError(f"sgd: gradient for unknown parameter {name!r}")
        t = params.tensors[name]
        if g.shape != t.data.shape:
            raise DimensionError(
                f"sgd: gradient shape {g.shape} != parameter shape {t.data.shape} "
                f"for {name!r}")
        t.data = t.data - lr * g


def adam_step(params: ParameterSet, grads: GradientMap, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over the parameters named in ``grads``.

    The step counter increments once per call; moment slots are created
    lazily the first time a parameter name appears.
    """
    if lr <= 0:
        raise InputError(f"adam: lr must be positive, got {lr}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        if name not in params.tensors:
            raise StateError(f"adam: gradient for unknown parameter {name!r}")
        p = params.tensors[name]
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam: gradient shape {g.shape} != parameter shape {p.data.shape} "
                f"for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        elif state.m[name].shape != p.data.shape:
            raise StateError(
                f"adam: stored moments for {name!r} have shape "
                f"{state.m[name].shape}, parameter is {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
