"""Adam with decoupled weight decay and a warmup-cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["AdamW", "warmup_cosine"]


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        """Apply one update from the accumulated ``.grad`` and clear them."""
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            data = p.data * (1.0 - lr * self.weight_decay) if self.weight_decay else p.data
            if g is not None:
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
                data = data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = data
            p.grad = None

    def state_arrays(self) -> dict:
        out = {"opt/t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt/m/{i}"] = m
            out[f"opt/v/{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["opt/t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"opt/m/{i}"])
            self.v[i] = np.array(arrays[f"opt/v/{i}"])


def warmup_cosine(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to zero.

    ``step`` counts from 0; the first step of warmup uses ``base_lr / warmup_steps``.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    decay = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / decay, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
