"""Adam with global-norm gradient clipping and decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 max_grad_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]):
        """Apply one update from a tensor->gradient map; params without a
        gradient in the map are left untouched."""
        live = [(name, p, grads[p]) for name, p in self.params.items() if p in grads]
        if not live:
            return
        scale = 1.0
        if self.max_grad_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for _, _, g in live))
            if total > self.max_grad_norm:
                scale = self.max_grad_norm / (total + 1e-12)
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p, g in live:
            g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
