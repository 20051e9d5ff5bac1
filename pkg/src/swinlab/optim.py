"""AdamW with decoupled weight decay, global-norm gradient clipping, and a
cosine learning-rate schedule with linear warmup.

The update uses the efficient bias-correction form: one scalar step size
``lr * sqrt(1 - beta2^t) / (1 - beta1^t)`` multiplies ``m / (sqrt(v) + eps)``.
Decay is applied directly to the weights (never through the moments), and
every 1-D parameter (LN affine, biases, per-head temperatures) is excluded
from decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError, ParameterError, ScheduleError
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _decayable(name: str, p: Tensor) -> bool:
    # 1-D parameters are LN affine, biases, and tau; none of them decay.
    return p.ndim > 1


def adamw_step(params: dict[str, Tensor], state: OptimState,
               lr: float | None = None) -> None:
    """One decoupled-AdamW update over every parameter that has a gradient.

    ``lr`` overrides ``state.lr`` for this step (the schedule hook).
    Parameters whose ``grad`` is None are skipped entirely.
    """
    if lr is None:
        lr = state.lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    step_size = lr * math.sqrt(bias2) / bias1
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise OptimizerError(
                f"parameter '{name}': grad shape {g.shape} != param shape {p.data.shape}"
            )
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= step_size * m / (np.sqrt(v) + state.eps)
        if state.weight_decay and _decayable(name, p):
            p.data -= lr * state.weight_decay * p.data


def clip_grad_norm(params: dict[str, Tensor], max_norm: float = 5.0) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  The scale is exactly max_norm / norm (no
    fudge epsilon), so the post-clip norm equals min(pre, max_norm) to
    rounding.  Parameter iteration order is the fixed insertion order, which
    keeps the reduction deterministic.
    """
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ScheduleError(
                f"warmup {self.warmup_steps} exceeds total {self.total_steps}"
            )
        if self.total_steps < 1:
            raise ScheduleError("total_steps must be >= 1")


def lr_at(sched: Schedule, step: int) -> float:
    """Linear ramp 0 -> base over warmup, then half-cosine decay base -> 0."""
    if step < 0 or step > sched.total_steps:
        raise ScheduleError(
            f"step {step} outside [0, {sched.total_steps}]"
        )
    if sched.warmup_steps > 0 and step <= sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    denom = sched.total_steps - sched.warmup_steps
    if denom == 0:
        return sched.base_lr
    progress = (step - sched.warmup_steps) / denom
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
