"""AdamW with decoupled weight decay, the absolute-lr rule and the warmup + half-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError


def compute_absolute_lr(base: float, batch: int) -> float:
    """base * batch / 256."""
    if batch < 1:
        raise ContractError("batch size must be >= 1")
    return base * batch / 256


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear ramp 0 -> peak over warmup, then half-cosine peak -> 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ContractError(f"warmup_steps {warmup_steps} must lie in [0, {total_steps})")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if step == total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.02,
    eps: float = 1e-8,
) -> OptimizerState:
    """
    One in-place AdamW update. A missing gradient counts as zeros, so parameters outside the
    active objective still receive weight decay. All gradients are checked before any update.
    """
    if lr < 0:
        raise ContractError("learning rate must be >= 0")
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.data.shape:
            raise DimensionError(f"adamw_step[{name}]", tensor.data.shape, grad.shape)
        if not np.isfinite(grad).all():
            raise NumericError("non-finite gradient", where=name)

    beta1, beta2 = betas
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            v = state.v[name] = np.zeros_like(tensor.data)
        theta = tensor.data * (1.0 - lr * weight_decay)
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = step
    return state
