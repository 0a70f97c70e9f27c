"""Optimizers and learning-rate schedules operating in place on Tensor data."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 to zero at ``total``."""
    if total <= 0:
        raise ValueError(f"cosine_lr: total must be positive, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total)) / 2.0


def step_lr(base_lr: float, step: int, step_size: int, gamma: float) -> float:
    return base_lr * gamma ** (step // step_size)


@dataclass
class AdamState:
    """Per-parameter Adam moments.

    ``schedule`` optionally maps a step count to a learning rate; when set,
    :func:`adam_step` ignores its ``lr`` argument in favour of it.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: Callable[[int], float] | None = None

    @classmethod
    def zeros_like(cls, param: Tensor, betas=(0.9, 0.999), eps: float = 1e-8, schedule=None) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0, betas[0], betas[1], eps, schedule)


def adam_step(param: Tensor, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place. ``weight_decay`` is decoupled (AdamW)."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient")
    if state.m.shape != param.shape:
        raise ValueError(f"adam_step: state shape {state.m.shape} != parameter shape {param.shape}")
    if state.schedule is not None:
        lr = state.schedule(state.t)
    g = param.grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    if weight_decay:
        param.data *= 1.0 - lr * weight_decay
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


class Adam:
    """Adam over a list of parameters.

    With ``decoupled`` (AdamW) weight decay shrinks the weights directly;
    otherwise it is added to the gradient as an L2 term.
    """

    def __init__(
        self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
        weight_decay: float = 0.0, decoupled: bool = True,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.states = [AdamState.zeros_like(p, betas, eps) for p in self.params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                continue
            if self.decoupled:
                adam_step(p, s, self.lr, self.weight_decay)
            else:
                if self.weight_decay:
                    p.grad = p.grad + self.weight_decay * p.data
                adam_step(p, s, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    """SGD with heavy-ball momentum and coupled L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers[i]
                if buf is None:
                    buf = self.buffers[i] = g.copy()
                else:
                    buf *= self.momentum
                    buf += g
                g = buf
            p.data -= (self.lr * g).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class LRSchedule:
    """Per-iteration learning rate: cosine decay or step decay over ``total`` iterations."""

    base_lr: float
    total: int
    kind: str = "cosine"
    step_size: int = 0
    gamma: float = 0.1
    _names: tuple = field(default=("cosine", "step", "constant"), repr=False)

    def __post_init__(self):
        if self.kind not in self._names:
            raise ValueError(f"unknown lr schedule {self.kind!r}")

    def __call__(self, step: int) -> float:
        if self.kind == "cosine":
            return cosine_lr(self.base_lr, min(step, self.total), self.total)
        if self.kind == "step":
            return step_lr(self.base_lr, step, max(self.step_size, 1), self.gamma)
        return self.base_lr
