"""Decoupled-weight-decay Adam with linear warmup / linear decay."""

import numpy as np


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, no_decay=(), lr_scale=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.lr_scale = dict(lr_scale or {})
        self.state = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for name, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr_factor=1.0):
        self.t += 1
        lr = self.lr * lr_factor
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.state[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * self.lr_scale.get(name, 1.0) * update


def linear_schedule(total_steps, warmup_ratio=0.1):
    """lr factor: linear 0 -> 1 over the warmup, then linear 1 -> 0."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        if total_steps == warmup:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warmup))

    return factor
