"""Mini-batch SGD with global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from choreo.nnkit.autodiff import Tensor


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    clip_norm: float = 5.0
    batch_size: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")


def global_grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_and_step(params: list[Tensor], cfg: SgdConfig) -> float:
    """Scale all gradients down to `clip_norm` if the global l2 norm exceeds
    it, then apply one plain SGD update. Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
    lr = cfg.learning_rate * scale
    for p in params:
        if p.grad is not None:
            p.data = p.data - (lr * p.grad).astype(p.data.dtype)
    return norm


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
