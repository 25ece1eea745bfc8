"""Adam with decoupled weight decay, cosine schedule, per-depth lr scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    """Raised when an optimizer step sees NaN/inf gradients; the step is not applied."""


@dataclass
class LrSchedule:
    peak_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """Linear warmup from 0 to peak, then cosine decay to min_lr; clamps past the end."""
    if step >= sched.total_steps:
        return sched.min_lr
    if step <= sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    u = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.min_lr + 0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + math.cos(math.pi * u))


def layer_lr_multipliers(num_layers: int, decay: float) -> list[float]:
    """Multiplier per depth group, index 0 = embeddings, 1..L = blocks, L+1 = head/final norm.

    Group at depth i gets decay^(L+1-i): the head stays at 1.0 and the
    multipliers shrink geometrically toward the embeddings.
    """
    if not 0 < decay <= 1:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    return [decay ** (num_layers + 1 - i) for i in range(num_layers + 2)]


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients by max_norm/||g|| when the global L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return [g * np.asarray(factor, dtype=g.dtype) for g in grads]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    lr_scales: list[float] | None = None,
) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    ``lr_scales`` applies a per-parameter multiplier to the step size (used for
    depth-wise learning-rate decay during fine-tuning).
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.data.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.data.shape} vs grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for param {i} at step {state.t + 1}")
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        step_lr = lr if lr_scales is None else lr * lr_scales[i]
        if weight_decay:
            p.data -= step_lr * weight_decay * p.data
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
