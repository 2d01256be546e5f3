"""Mini-batch AdamW loop shared by every trainable model."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
import time
from typing import Callable

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.config import TrainConfig
from app.core.errors import DataError, NumericalError
from app.nn.graph import ModelGraph
from app.nn.initializers import derive_seed
from app.nn.objectives import Objective
from app.nn.optim import EarlyStopping, ReduceLROnPlateau, adamw_step
from data.enums import StopReason

logger = logging.getLogger(__name__)

ObjectiveFactory = Callable[[np.ndarray | None], Objective]

_SHUFFLE_STREAM = 101


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    # monitored loss of the incoming parameters, before any update
    initial_val_loss: float = math.nan
    stop_reason: StopReason = StopReason.NO_EPOCHS

    @property
    def train_losses(self) -> list[float]:
        return [record.train_loss for record in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [record.val_loss for record in self.epochs]

    @property
    def learning_rates(self) -> list[float]:
        return [record.lr for record in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": [record.epoch for record in self.epochs],
                "train_loss": self.train_losses,
                "val_loss": self.val_losses,
                "lr": self.learning_rates,
            },
            columns=["epoch", "train_loss", "val_loss", "lr"],
        )


def write_train_log(log: TrainLog, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.to_frame().to_csv(path, index=False, float_format="%.10g")
    return path


def evaluate_loss(
    graph: ModelGraph,
    make_objective: ObjectiveFactory,
    x: np.ndarray,
    targets: np.ndarray | None = None,
    batch_size: int = 256,
) -> float:
    """Sample-weighted mean of the per-batch objective over ``x``."""
    count = x.shape[0]
    if count == 0:
        raise DataError("cannot evaluate a loss on an empty set")
    total = 0.0
    for offset in range(0, count, batch_size):
        stop = min(offset + batch_size, count)
        batch_targets = None if targets is None else targets[offset:stop]
        result = make_objective(batch_targets)(graph, x[offset:stop], need_grad=False)
        total += result.total * (stop - offset)
    return total / count


def fit(
    graph: ModelGraph,
    make_objective: ObjectiveFactory,
    train_x: np.ndarray,
    val_x: np.ndarray,
    config: TrainConfig,
    *,
    train_targets: np.ndarray | None = None,
    val_targets: np.ndarray | None = None,
    desc: str = "train",
    progress: bool = False,
) -> TrainLog:
    """Train ``graph`` in place and restore the best-validation parameters.

    Validation loss drives both early stopping and the plateau scheduler.
    Without validation data the training loss is monitored instead.
    """
    count = train_x.shape[0]
    if count == 0:
        raise DataError(f"{desc}: training set is empty")
    batch_size = min(config.batch_size, count)
    if batch_size < config.batch_size:
        logger.info("%s: batch size clamped to %d (set size)", desc, batch_size)
    rng = np.random.default_rng(derive_seed(config.seed, _SHUFFLE_STREAM))
    stopper = EarlyStopping(config.early_stop_patience)
    scheduler = ReduceLROnPlateau(config.learning_rate, config.plateau_patience, config.plateau_factor, config.min_lr)
    lr = config.learning_rate
    best = graph.params.snapshot()
    log = TrainLog()
    try:
        if val_x.shape[0]:
            log.initial_val_loss = evaluate_loss(graph, make_objective, val_x, val_targets)
        else:
            log.initial_val_loss = evaluate_loss(graph, make_objective, train_x, train_targets)
    except NumericalError as exc:
        raise NumericalError(f"{desc}: before training: {exc}") from exc
    if config.max_epochs == 0:
        logger.info("%s: zero epochs requested, parameters unchanged", desc)
        return log
    log.stop_reason = StopReason.MAX_EPOCHS

    for epoch in tqdm(range(config.max_epochs), desc=desc, unit="epoch", disable=not progress, leave=False):
        started = time.perf_counter()
        order = rng.permutation(count)
        running = 0.0
        try:
            for offset in range(0, count, batch_size):
                index = order[offset : offset + batch_size]
                targets = None if train_targets is None else train_targets[index]
                result = make_objective(targets)(graph, train_x[index], need_grad=True)
                adamw_step(
                    graph.params,
                    result.grads,
                    lr,
                    beta1=config.beta1,
                    beta2=config.beta2,
                    eps=config.eps,
                    weight_decay=config.weight_decay,
                )
                running += result.total * len(index)
            train_loss = running / count
            if val_x.shape[0]:
                val_loss = evaluate_loss(graph, make_objective, val_x, val_targets)
            else:
                val_loss = evaluate_loss(graph, make_objective, train_x, train_targets)
        except NumericalError as exc:
            raise NumericalError(f"{desc}: epoch {epoch}: {exc}") from exc

        log.epochs.append(EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - started))
        logger.debug("%s epoch %d: train=%.6g val=%.6g lr=%.3g", desc, epoch, train_loss, val_loss, lr)
        if stopper.step(val_loss, epoch):
            best = graph.params.snapshot()
            log.best_epoch = epoch
            log.best_val_loss = val_loss
        if stopper.should_stop:
            log.stop_reason = StopReason.EARLY_STOP
            logger.info("%s: early stop at epoch %d", desc, epoch)
            break
        lr = scheduler.step(val_loss)

    graph.params.restore(best)
    logger.info(
        "%s: %d epochs, best epoch %d (val %.6g), stop reason %s",
        desc,
        len(log.epochs),
        log.best_epoch,
        log.best_val_loss,
        log.stop_reason.value,
    )
    return log
