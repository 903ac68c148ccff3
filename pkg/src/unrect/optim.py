"""Adam optimizer over flat name->array parameter dicts.

State arrays match each parameter's dtype, and updates happen in place so
the caller's dict keeps its identity across steps.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValidationError("Adam: lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        """One update. Parameters without a gradient entry are skipped."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            p = params[name]
            g = np.asarray(g, dtype=p.dtype)
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
