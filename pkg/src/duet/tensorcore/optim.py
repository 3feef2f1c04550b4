from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    Parameters without a gradient are skipped entirely (no moment update).
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def step(self, store):
        grads = {}
        for name, p in store.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            grads[name] = p.grad
        if self.grad_clip is not None and grads:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {n: g * scale for n, g in grads.items()}

        store.step += 1
        t = store.step
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = store[name]
            m, v = store.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            store.moments[name] = (m, v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
        return store


def optimizer_step(store, lr=1e-4, **hyper):
    """Apply one AdamW update to every parameter that holds a gradient."""
    return AdamW(lr=lr, **hyper).step(store)
