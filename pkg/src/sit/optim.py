"""Adam with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Parameter
from .model import is_decayed


@dataclass(frozen=True)
class Schedule:
    kind: str = "cosine"  # "cosine" or "constant"
    base_lr: float = 5e-4
    warmup_steps: int = 0
    total_steps: int = 1
    floor_lr: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0 over ``warmup_steps``, then cosine decay to ``floor_lr``.

    A ``constant`` schedule returns ``base_lr`` at every step.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    s = schedule
    if s.kind == "constant":
        return s.base_lr
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    span = max(1, s.total_steps - s.warmup_steps)
    progress = min(1.0, (step - s.warmup_steps) / span)
    return s.floor_lr + 0.5 * (s.base_lr - s.floor_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    schedule: Schedule = field(default_factory=Schedule)
    max_grad_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparams(self) -> dict:
        s = self.schedule
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
            "step": self.step,
            "schedule": {
                "kind": s.kind,
                "base_lr": s.base_lr,
                "warmup_steps": s.warmup_steps,
                "total_steps": s.total_steps,
                "floor_lr": s.floor_lr,
            },
        }

    @classmethod
    def from_hyperparams(cls, d: dict) -> "AdamState":
        d = dict(d)
        sched = Schedule(**d.pop("schedule"))
        return cls(schedule=sched, **d)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


def adam_step(params: list[Parameter], state: AdamState) -> float:
    """Apply one bias-corrected AdamW update in place and zero the grads.

    Decay (``p -= lr·wd·p``) is applied before the moment update and only to
    parameters selected by :func:`sit.model.is_decayed`. Returns the lr used.
    """
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if state.max_grad_norm is not None:
        clip_grad_norm(params, state.max_grad_norm)
    lr = lr_at(state.step, state.schedule)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and is_decayed(p.name):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)
    return lr
