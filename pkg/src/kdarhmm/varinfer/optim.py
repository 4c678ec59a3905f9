"""Adam over a dict of named parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = {k: 0 for k in params}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], keys=None) -> None:
        """Descend along ``grads`` (gradients of the loss being minimized).

        ``keys`` restricts the update to those parameters; the others and
        their moment estimates are left untouched.
        """
        for k in self.params if keys is None else keys:
            p = self.params[k]
            self.t[k] += 1
            c1 = 1.0 - self.beta1 ** self.t[k]
            c2 = 1.0 - self.beta2 ** self.t[k]
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
