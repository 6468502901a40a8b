from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a dict of named numpy arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float | dict[str, float] = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def _lr(self, name: str) -> float:
        return self.lr[name] if isinstance(self.lr, dict) else self.lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self._lr(name) * (m / c1) / (np.sqrt(v / c2) + self.eps)
