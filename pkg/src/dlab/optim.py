"""AdamW and the warmup-stable-decay learning-rate schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor

BETAS = (0.9, 0.95)
WEIGHT_DECAY = 0.1


def wsd_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.1, decay_frac: float = 0.1) -> float:
    """Linear ramp 0 -> peak over the first 10%, flat, linear peak -> 0 over the last 10%."""
    if step < 0 or step > total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warm = warmup_frac * total_steps
    decay_start = (1.0 - decay_frac) * total_steps
    if step < warm:
        return peak_lr * step / warm
    if step <= decay_start:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - decay_start)


class AdamW:
    """Decoupled weight decay Adam. Parameters are updated in place.

    Weight decay is applied to matrices only (ndim >= 2); gains, biases and
    the SSM decay vectors are left alone.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=BETAS, weight_decay: float = WEIGHT_DECAY, eps: float = 1e-8):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr = lr
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
