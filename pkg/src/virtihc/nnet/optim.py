"""Adam and the cosine-decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputValidationError
from .layers import Parameter


@dataclass
class LrSchedule:
    initial: float = 1e-3
    total_steps: int = 1

    def __post_init__(self):
        if not self.initial > 0:
            raise InputValidationError("initial learning rate must be positive")
        if self.total_steps < 1:
            raise InputValidationError("total_steps must be >= 1")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """``initial * 0.5 * (1 + cos(pi * step / total_steps))``; 0 past the end."""
    if step >= sched.total_steps:
        return 0.0
    step = max(step, 0)
    return sched.initial * 0.5 * (1.0 + math.cos(math.pi * step / sched.total_steps))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Parameter], **kw) -> "AdamState":
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params], **kw)


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= update.astype(p.value.dtype)
        p.grad[...] = 0


@dataclass
class Adam:
    params: list[Parameter]
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(self.params, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr)
