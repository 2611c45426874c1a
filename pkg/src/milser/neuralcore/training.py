"""Mini-batch training loop shared by the segment CNN and the bag aggregators.

A trainable model exposes ``params`` (name -> array, updated in place),
``loss_and_grads(batch)`` and ``loss(batch)``, where ``batch`` is a tuple of
arrays sharing their first axis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .optim import Adam, EarlyStopping, TrainConfig, lr_schedule

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def n_epochs(self) -> int:
        return len(self.epochs)


def _take(data, idx):
    return tuple(a[idx] for a in data)


def evaluate_loss(model, data, batch_size=1024) -> float:
    n = len(data[0])
    total = 0.0
    for start in range(0, n, batch_size):
        chunk = _take(data, slice(start, start + batch_size))
        total += model.loss(chunk) * len(chunk[0])
    return total / n


def fit(model, train, val, cfg: TrainConfig, rng: np.random.Generator | None = None) -> TrainLog:
    """Train with Adam, staircase decay and early stopping on validation loss.

    The parameters of the best validation epoch are restored before returning.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = Adam()
    stopper = EarlyStopping(cfg.patience)
    history = TrainLog()
    best = {k: v.copy() for k, v in model.params.items()}
    n = len(train[0])

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = _take(train, order[start:start + cfg.batch_size])
            loss, grads = model.loss_and_grads(batch)
            opt.step(model.params, grads, lr)
            running += loss * len(batch[0])
        val_loss = evaluate_loss(model, val)
        history.epochs.append(EpochRecord(epoch, lr, running / n, val_loss))
        log.debug("epoch %d lr %.6f train %.4f val %.4f", epoch, lr, running / n, val_loss)

        stop = stopper.update(epoch, val_loss)
        if stopper.improved_last:
            best = {k: v.copy() for k, v in model.params.items()}
        if stop:
            history.stopped_early = True
            break

    for k, v in best.items():
        model.params[k][...] = v
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best
    return history


def group_split(groups, fraction, rng):
    """Split sample indices so that no group straddles train and validation.

    Returns (train_idx, val_idx); at least one group goes to validation.
    """
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if uniq.size < 2:
        raise ValueError("need at least two groups to carve out a validation split")
    n_val = min(uniq.size - 1, max(1, int(math.ceil(fraction * uniq.size))))
    val_groups = rng.permutation(uniq)[:n_val]
    is_val = np.isin(groups, val_groups)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)
