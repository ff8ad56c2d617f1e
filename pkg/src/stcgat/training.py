"""Mini-batch training with Adam, per-epoch validation and early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import substrate as S
from .data import PreparedData, windows
from .errors import NumericError, TrainingError
from .model import STCGAT, l1_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float
    steps: int


@dataclass
class TrainResult:
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    best_state: dict | None = None
    steps: int = 0
    stopped_early: bool = False


def split_loss(model: STCGAT, data: PreparedData, split: str, batch: int | None = None) -> float:
    """Mean L1 (normalised units) over every window of ``split``, evaluation mode."""
    total, count = 0.0, 0
    with S.no_grad():
        for wb in windows(data.normalized, data.splits[split], data.window, batch or model.config.batch):
            pred = model.forward(wb.inputs).data.astype(np.float64)
            total += float(np.abs(pred - wb.targets).sum())
            count += wb.targets.size
    return total / count


def train(model: STCGAT, data: PreparedData, max_epochs: int | None = None,
          patience: int | None = None, max_steps: int | None = None,
          restore_best: bool = True,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Fit ``model`` on the training split of ``data``.

    Shuffling and dropout are driven by generators derived from
    ``model.config.seed``, so two runs with the same seed match bit for bit.
    """
    cfg = model.config
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    patience = cfg.patience if patience is None else patience
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState()
    result = TrainResult()
    params = list(model.params)
    wait = 0

    for epoch in range(1, max_epochs + 1):
        t0 = time.perf_counter()
        epoch_seed = int(shuffle_rng.integers(2 ** 63))
        total, count = 0.0, 0
        stream = windows(data.normalized, data.splits.train, data.window, cfg.batch,
                         seed=epoch_seed, shuffle=True)
        for b, wb in enumerate(stream, start=1):
            model.params.zero_grad()
            try:
                pred = model.forward(wb.inputs, training=True, rng=dropout_rng)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            loss = l1_loss(pred, wb.targets)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            S.backward(loss)
            adam_step(params, state, cfg.lr)
            result.steps += 1
            total += value * wb.targets.size
            count += wb.targets.size
            if max_steps is not None and result.steps >= max_steps:
                break
        val = split_loss(model, data, "val")
        entry = EpochLog(epoch, total / count, val, time.perf_counter() - t0, result.steps)
        result.history.append(entry)
        log.info("epoch %d train %.6f val %.6f", epoch, entry.train_loss, val)
        if on_epoch is not None:
            on_epoch(entry)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            result.best_state = model.params.state()
            wait = 0
        else:
            wait += 1
        if max_steps is not None and result.steps >= max_steps:
            break
        if wait >= patience:
            result.stopped_early = True
            break

    if restore_best and result.best_state is not None:
        model.params.load_state(result.best_state)
    return result
