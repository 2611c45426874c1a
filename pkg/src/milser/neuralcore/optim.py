"""Adam, the staircase learning-rate decay and early stopping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    decay_rate: float = 0.8
    decay_every_epochs: int = 2
    batch_size: int = 128
    patience: int = 3
    max_epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("learning_rate", "decay_every_epochs", "batch_size", "patience", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must lie in (0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: lr0 * decay ** floor(epoch / every)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.learning_rate * cfg.decay_rate ** (epoch // cfg.decay_every_epochs)


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update ``params`` in place from ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            step = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p -= (lr * step).astype(p.dtype, copy=False)


def adam_step(params, grads, state: Adam | None, lr: float) -> Adam:
    """Functional wrapper: one Adam update, returning the (possibly new) state."""
    state = state or Adam()
    state.step(params, grads, lr)
    return state


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.waited = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.waited = val_loss, epoch, 0
            return False
        self.waited += 1
        return self.waited >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.waited == 0
