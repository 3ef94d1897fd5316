"""Mini-batch SGD training loop shared by baseline, L1 and retraining runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .network import Batch, NetworkSpec, WeightSet, loss_and_grads
from .tensor import SGD

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 42
    # step decay: lr is multiplied by lr_decay every decay_every epochs (0 = off)
    lr_decay: float = 0.1
    decay_every: int = 3


def train(spec: NetworkSpec, ws: WeightSet, data: Batch, cfg: TrainConfig,
          alpha: float = 0.0, l1_layers=()) -> tuple[WeightSet, list[float]]:
    """Train a copy of ``ws``; returns the new weights and per-epoch mean loss.

    The shuffling order depends only on ``cfg.seed`` so runs are bitwise
    reproducible.
    """
    ws = ws.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.lr, cfg.momentum, alpha, l1_layers)
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        if cfg.decay_every and epoch and epoch % cfg.decay_every == 0:
            opt.lr *= cfg.lr_decay
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            loss, _, grads = loss_and_grads(spec, ws, batch)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            opt.step(ws, grads)
            losses.append(loss)
        mean = float(np.mean(losses)) if losses else 0.0
        history.append(mean)
        log.debug("epoch %d loss %.4f", epoch, mean)
    return ws, history
