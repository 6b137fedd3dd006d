"""Optimiser and the generic early-stopping training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: ad.Gradients) -> float:
        gs = [grads[p] for p in self.params]
        total = math.sqrt(sum(float((g * g).sum()) for g in gs))
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return total


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Group indices of similar length into batches; shuffled when ``rng`` is given."""
    lengths = np.asarray(lengths)
    if rng is None:
        order = np.argsort(lengths, kind="stable")
    else:
        jitter = rng.random(len(lengths))
        order = np.lexsort((jitter, lengths))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 3e-4
    patience: int = 3
    seed: int = 0
    clip_norm: float | None = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class DivergenceError(RuntimeError):
    pass


def fit(model, loss_fn: Callable[[np.ndarray], Tensor], n_train: int, lengths: Sequence[int],
        cfg: TrainConfig, valid_fn: Callable[[], float] | None = None) -> TrainResult:
    """Train ``model`` in place and restore the best-validation parameters.

    ``loss_fn(indices)`` builds the scalar loss of one batch on the active
    tape. ``valid_fn()`` returns the validation loss; without it the
    training loss drives early stopping.
    """
    result = TrainResult()
    if cfg.epochs <= 0 or n_train == 0:
        return result
    rng = ad.make_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    best, best_state, stale = math.inf, None, 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in length_batches(lengths, cfg.batch_size, rng):
            with ad.Tape() as tape:
                loss = loss_fn(idx)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}")
            opt.step(ad.backward(tape, loss))
            total += loss.item() * len(idx)
            count += len(idx)
        result.train_loss.append(total / count)
        score = valid_fn() if valid_fn is not None else result.train_loss[-1]
        if not np.isfinite(score):
            raise DivergenceError(f"validation loss became {score} at epoch {epoch}")
        result.valid_loss.append(score)
        log.info("epoch %d train %.4f valid %.4f", epoch, result.train_loss[-1], score)
        if score < best - 1e-6:
            best, best_state, stale = score, model.state_dict(), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                result.stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result
