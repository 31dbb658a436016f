"""Adam optimizer with bias correction.

Defaults follow the training recipe used throughout this package:
learning rate 0.002, beta1 = 0.0 (no first-moment decay), beta2 = 0.99.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor

__all__ = ["Adam"]


class Adam:
    """Per-parameter first/second moment accumulators plus a step counter.

    Parameters with ``grad is None`` at step() time are treated as having
    zero gradient for that step.
    """

    def __init__(self, params: list[Tensor], lr: float = 0.002,
                 beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} does not match param {p.data.shape}")
            m = self.m[i]
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
