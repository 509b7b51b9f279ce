"""Adam optimizer and a validation-plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .model import ParamStore


class Adam:
    """Standard Adam over a ParamStore; frozen tensors are skipped."""

    def __init__(self, params: ParamStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data)
                  for n, p in params.items() if p.requires_grad}
        self.v = {n: np.zeros_like(p.data)
                  for n, p in params.items() if p.requires_grad}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mh = m / b1t
            vh = v / b2t
            p.data -= self.lr * mh / (np.sqrt(vh) + self.eps)


class PlateauSchedule:
    """Halve the learning rate when validation loss stops improving.

    `update` returns False once the learning rate drops below `min_lr`,
    signalling that training should stop.
    """

    def __init__(self, optimizer: Adam, factor: float = 0.5,
                 patience: int = 10, min_lr: float = 1e-7):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best - 1e-12:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.opt.lr *= self.factor
                self.bad_epochs = 0
        return self.opt.lr >= self.min_lr
