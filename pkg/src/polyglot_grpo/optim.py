"""AdamW with decoupled weight decay and a cosine learning-rate schedule with linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def cosine_lr(step: int, total: int, base_lr: float, warmup_ratio: float = 0.1) -> float:
    """Learning rate for 0-based ``step`` out of ``total``."""
    if total <= 0:
        return base_lr
    warmup = math.ceil(warmup_ratio * total)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    shape: tuple
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.m = np.zeros(self.shape)
        self.v = np.zeros(self.shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update of ``params`` (gradient of a loss to minimize)."""
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        if lr == 0.0:
            return
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        if self.weight_decay:
            params *= 1 - lr * self.weight_decay
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)
