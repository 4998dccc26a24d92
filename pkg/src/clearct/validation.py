"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .mil import Bag

__all__ = ["check_bags", "check_bag_targets", "check_slices"]


def check_bags(X, n_features: int | None = None) -> list[np.ndarray]:
    """Coerce a sequence of bags (arrays or :class:`Bag`) to float64 (K, d) arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if len(X) == 0:
        raise ValueError("expected at least one bag")
    out = []
    for i, b in enumerate(X):
        arr = np.asarray(b.embeddings if isinstance(b, Bag) else b, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"bag {i}: expected a (K>=1, d) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"bag {i}: contains NaN or infinite values")
        out.append(arr)
    dims = {a.shape[1] for a in out}
    if len(dims) != 1:
        raise ValueError(f"bags have inconsistent feature dims {sorted(dims)}")
    if n_features is not None and out[0].shape[1] != n_features:
        raise ValueError(f"bags have {out[0].shape[1]} features, estimator was fitted with {n_features}")
    return out


def check_bag_targets(y, n_bags: int, task_kind: str) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[0] != n_bags:
        raise ValueError(f"got {y.shape[0]} targets for {n_bags} bags")
    if task_kind == "multilabel":
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or not np.all((y == 0) | (y == 1)):
            raise ValueError("multilabel targets must be a binary (n_bags, n_classes) matrix")
        return y.astype(np.float64)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer) or np.any(y < 0):
        raise ValueError("multiclass targets must be non-negative integer class indices")
    return y.astype(np.int64)


def check_slices(X, input_size: Sequence[int]) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != tuple(input_size):
        raise ValueError(f"expected slices of shape (N, {input_size[0]}, {input_size[1]}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("slices contain NaN or infinite values")
    return X
