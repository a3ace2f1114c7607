"""AdamW with decoupled weight decay, the warmup + linear-decay schedule,
and global-norm gradient clipping."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class LrSchedule:
    """Linear ramp 0 -> peak over warmup_steps, then linear decay to 0 at total_steps."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValidationError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValidationError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} / {self.total_steps}"
            )


def lr_at(step, schedule):
    """Learning rate at a step; steps past the end clamp to 0 with a warning."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    if step > schedule.total_steps:
        warnings.warn(
            f"lr_at: step {step} beyond total_steps {schedule.total_steps}, clamping to 0",
            stacklevel=2,
        )
        return 0.0
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.peak_lr * (schedule.total_steps - step) / span


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name, step):
        self.param_name = name
        self.step = step
        super().__init__(f"non-finite gradient for parameter {name!r} at step {step}")


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=1e-5):
    """One decoupled-weight-decay Adam update, in place.

    params and grads are name -> ndarray mappings; moments live in state
    keyed the same way and are created on first use.
    """
    if lr < 0:
        raise ValidationError(f"lr must be >= 0, got {lr}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValidationError(f"adamw_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, t)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * (mhat / (np.sqrt(vhat) + eps))
        if weight_decay:
            p -= lr * weight_decay * p


def clip_global_norm(grads, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm. Mutates in place when scaling is needed.
    """
    if max_norm <= 0:
        raise ValidationError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
