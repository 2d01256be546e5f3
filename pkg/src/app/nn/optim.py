from __future__ import annotations

import logging
import math

import numpy as np

from app.core.errors import ShapeError
from app.nn.graph import ParamSet

logger = logging.getLogger(__name__)


def adamw_step(
    params: ParamSet,
    grads: dict[str, dict[str, np.ndarray]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> ParamSet:
    """One AdamW update of every parameter that has a gradient.

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)
    """
    params.step += 1
    t = params.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for layer, group in grads.items():
        for name, grad in group.items():
            weight = params.tensors[layer][name]
            if grad.shape != weight.shape:
                raise ShapeError(f"gradient for {layer}.{name} has shape {grad.shape}, expected {weight.shape}")
            m = params.first_moment.setdefault(layer, {}).get(name)
            v = params.second_moment.setdefault(layer, {}).get(name)
            if m is None:
                m = np.zeros_like(weight)
                v = np.zeros_like(weight)
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            params.first_moment[layer][name] = m
            params.second_moment[layer][name] = v
            update = (m / correction1) / (np.sqrt(v / correction2) + eps) + weight_decay * weight
            params.tensors[layer][name] = weight - lr * update
    return params


class EarlyStopping:
    """Tracks the best monitored value and signals after ``patience`` epochs without improvement."""

    def __init__(self, patience: int, min_delta: float = 0.0) -> None:
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.counter = 0
        self.should_stop = False

    def step(self, value: float, epoch: int) -> bool:
        """Return True when ``value`` is a new best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        if self.counter >= self.patience:
            self.should_stop = True
        return False


class ReduceLROnPlateau:
    def __init__(self, lr: float, patience: int, factor: float, min_lr: float) -> None:
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.counter = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.counter = 0
            return self.lr
        self.counter += 1
        if self.counter >= self.patience:
            reduced = max(self.lr * self.factor, self.min_lr)
            if reduced < self.lr:
                logger.info("Plateau: learning rate %.3g -> %.3g", self.lr, reduced)
            self.lr = reduced
            self.counter = 0
        return self.lr
