"""First-order adaptive-moment optimizer over flat parameter arrays.

Every trainable object in the engine exposes its parameters as plain
numpy arrays, so one in-place optimizer covers fields, Gaussians, and
deformation networks alike. State is per-instance; updates are
deterministic functions of the gradient sequence.
"""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction, updating a parameter array in place."""

    def __init__(self, shape, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8,
                 dtype=np.float64):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Apply one update to `params` in place."""
        if params.shape != self.m.shape:
            raise ValueError(
                f"parameter shape {params.shape} does not match "
                f"optimizer state {self.m.shape}")
        g = grad.astype(self.m.dtype, copy=False)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        params -= upd.astype(params.dtype, copy=False)
