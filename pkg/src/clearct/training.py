"""Small training utilities shared by the estimators and the harness."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["EarlyStopState", "bucketed_batches"]


@dataclass
class EarlyStopState:
    """Stops after ``patience`` epochs without a strict improvement, or at ``max_epochs``."""

    patience: int = 8
    max_epochs: int = 32
    best_val_metric: float = -math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0
    stopped_epoch: int | None = None

    def update(self, epoch: int, metric: float) -> bool:
        """Record the metric of a finished epoch; returns True when training should halt."""
        improved = metric > self.best_val_metric
        if improved:
            self.best_val_metric = metric
            self.best_epoch = epoch
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        if self.epochs_since_best >= self.patience or epoch + 1 >= self.max_epochs:
            self.stopped_epoch = epoch
            return True
        return False

    @property
    def improved_last(self) -> bool:
        return self.epochs_since_best == 0


def bucketed_batches(lengths, batch_size: int, rng: np.random.Generator, bucket_factor: int = 8) -> list[np.ndarray]:
    """Shuffled batches in which bags of similar length are grouped to limit padding."""
    lengths = np.asarray(lengths)
    order = rng.permutation(len(lengths))
    batches = []
    span = batch_size * bucket_factor
    for start in range(0, len(order), span):
        chunk = order[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]
