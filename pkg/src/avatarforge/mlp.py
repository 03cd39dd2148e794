"""Small fully-connected networks with explicit forward and backward passes.

All learnable parameters live in a single flat vector; weight matrices
and bias vectors are reshaped views into it, so optimizers and
finite-difference tests can treat a network as one array and in-place
updates are picked up by the next forward call without copying.

Hidden activations are SiLU (z * sigmoid(z)): smooth everywhere, so
central finite differences converge cleanly where a ReLU kink would
stall them, and its derivative reuses the forward sigmoid so the
backward pass costs no extra transcendentals.
"""

from __future__ import annotations

import numpy as np


def sigmoid_stable(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free for any z and much faster than masked exp
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z: np.ndarray) -> np.ndarray:
    return z * sigmoid_stable(z)


def silu_grad(z: np.ndarray, sig: np.ndarray = None) -> np.ndarray:
    """d silu/dz; pass the forward sigmoid to skip recomputing it."""
    s = sigmoid_stable(z) if sig is None else sig
    return s * (1.0 + z * (1.0 - s))


class MLP:
    """SiLU MLP with a linear output layer and analytic parameter gradients.

    `sizes` lists layer widths input-first, e.g. (51, 64, 64, 4). Output
    nonlinearities (softplus/sigmoid heads) are the caller's business so
    the same network serves density/color fields and deformation nets.
    """

    def __init__(self, sizes, seed=0, dtype=np.float32, zero_last=False):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"need at least two positive layer sizes, got {sizes}")
        self.sizes = sizes
        self.dtype = np.dtype(dtype)

        n = sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))
        self.params = np.zeros(n, dtype=self.dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            w = self.params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.params[off:off + fan_out]
            off += fan_out
            self.weights.append(w)
            self.biases.append(b)

        rng = np.random.default_rng(seed)
        for i, w in enumerate(self.weights):
            last = i == len(self.weights) - 1
            if last and zero_last:
                continue
            # He-style scaling for the SiLU stack, Xavier for the linear head
            std = np.sqrt((1.0 if last else 2.0) / self.sizes[i])
            w[...] = rng.normal(0.0, std, size=w.shape).astype(self.dtype)

    @property
    def n_params(self) -> int:
        return self.params.size

    def forward(self, x: np.ndarray, need_cache=False):
        """Evaluate the network on a batch x: [M, sizes[0]] -> [M, sizes[-1]].

        With need_cache=True also returns the activation cache consumed
        by backward().
        """
        h = np.ascontiguousarray(x, dtype=self.dtype)
        hs = [h]      # layer inputs
        zs = []       # hidden pre-activations
        sigs = []     # their sigmoids, reused by silu_grad
        n_hidden = len(self.weights) - 1
        for i in range(n_hidden):
            z = h @ self.weights[i] + self.biases[i]
            s = sigmoid_stable(z)
            h = z * s
            if need_cache:
                zs.append(z)
                sigs.append(s)
            hs.append(h)
        y = h @ self.weights[-1] + self.biases[-1]
        if need_cache:
            return y, (hs, zs, sigs)
        return y

    def backward(self, cache, grad_y: np.ndarray, with_grad_x=False):
        """Backpropagate output gradients to a flat parameter gradient.

        Returns (grad_params, grad_x); grad_x is None unless requested.
        """
        hs, zs, sigs = cache
        grads = np.zeros_like(self.params, dtype=self.dtype)
        gw_views: list[np.ndarray] = []
        gb_views: list[np.ndarray] = []
        off = 0
        for i in range(len(self.weights)):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            gw_views.append(grads[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            gb_views.append(grads[off:off + fan_out])
            off += fan_out

        g = np.ascontiguousarray(grad_y, dtype=self.dtype)
        for i in range(len(self.weights) - 1, -1, -1):
            gw_views[i][...] = hs[i].T @ g
            gb_views[i][...] = g.sum(axis=0)
            if i == 0 and not with_grad_x:
                return grads, None
            g = g @ self.weights[i].T
            if i > 0:
                g = g * silu_grad(zs[i - 1], sigs[i - 1])
        return grads, g
