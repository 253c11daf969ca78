"""Adam optimizer over a ParamStore (beta1=0.9, beta2=0.999, eps=1e-8)."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, store, trainable=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.trainable = sorted(trainable if trainable is not None else store.names())
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(store[n]) for n in self.trainable}
        self._v = {n: np.zeros_like(store[n]) for n in self.trainable}

    def step(self, grads, lr_for):
        """Apply one update.  `lr_for(name)` gives the per-parameter rate."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in self.trainable:
            g = grads.get(name)
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.store.set_(name, self.store[name] - lr_for(name) * update)


def decayed_lr(base, epoch, factor=0.8, every=5):
    """Step-decayed learning rate: base * factor ** (epoch // every)."""
    return base * factor ** (epoch // every)
