"""Momentum SGD with L2 weight decay."""

import numpy as np

from remi.errors import InputError, NumericError


class SGD:
    """Heavy-ball SGD::

        g <- grad + weight_decay * w
        v <- momentum * v + g
        w <- w - lr * v

    Velocity buffers persist across :meth:`step` calls.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr < 0:
            raise InputError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [None] * len(self.params)

    def step(self, grads=None):
        """Apply one update; ``grads`` is a flat vector or None to use ``p.grad``."""
        per_param = self._split(grads)
        for g in per_param:
            if not np.all(np.isfinite(g)):
                raise NumericError("refusing SGD step with non-finite gradient")
        for i, (p, g) in enumerate(zip(self.params, per_param)):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = g.copy() if self.velocity[i] is None else self.momentum * self.velocity[i] + g
                self.velocity[i] = v
                g = v
            if self.lr:
                p.data = p.data - self.lr * g

    def _split(self, grads):
        if grads is None:
            return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        grads = np.asarray(grads, dtype=np.float64)
        total = sum(p.size for p in self.params)
        if grads.shape != (total,):
            raise InputError(f"expected flat gradient of length {total}, got {grads.shape}")
        out, offset = [], 0
        for p in self.params:
            out.append(grads[offset:offset + p.size].reshape(p.shape))
            offset += p.size
        return out
