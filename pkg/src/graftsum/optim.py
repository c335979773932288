"""Adam with global-norm gradient clipping and decoupled weight decay."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    """A parameter reached the optimizer without a populated gradient."""


class Adam:
    """Bias-corrected Adam.

    Update order per step: clip all gradients to the global norm bound,
    apply decoupled weight decay, then the adaptive update; gradients are
    zeroed afterwards.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        clip_norm: Optional[float] = 0.1,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_global_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is None:
                raise MissingGradError("parameter has no gradient; run backward() first")
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self) -> None:
        norm = self.grad_global_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm > 0:
            scale = self.clip_norm / norm
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if scale == 1.0 else p.grad * p.data.dtype.type(scale)
            if self.weight_decay:
                p.data -= p.data.dtype.type(self.lr * self.weight_decay) * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None
