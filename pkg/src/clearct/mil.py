"""Attention-based multiple-instance head over frozen slice embeddings.

A bag of K slice embeddings passes through a Linear+ReLU adapter to 256
dimensions, is pooled with softmax attention weights
``a_k ∝ exp(w^T tanh(V h_k))``, and the pooled vector goes to a
LayerNorm -> Linear -> SiLU -> Linear classification head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import LayerNorm, LinearLayer, Module, glorot_uniform
from .tensor import Tensor

__all__ = [
    "Bag",
    "AttentionParams",
    "AdapterConfig",
    "MILHead",
    "adapter_forward",
    "attention_weights",
    "abmil_pool",
    "classify",
    "bce_multilabel_loss",
    "cross_entropy_loss",
    "pad_bags",
]

ADAPTER_WIDTH = 256
_MASKED = -1e30


@dataclass
class Bag:
    embeddings: np.ndarray  # (K, d)
    labels: np.ndarray
    key_slice_indices: tuple = ()
    patient_id: str = ""
    window_tags: tuple = ()
    slice_indices: tuple = ()
    scan_id: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError(f"bag {self.scan_id or self.patient_id}: embeddings must be (K>=1, d), got {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError(f"bag {self.scan_id or self.patient_id}: non-finite embeddings")
        k = self.embeddings.shape[0]
        self.labels = np.asarray(self.labels)
        if not self.slice_indices:
            self.slice_indices = tuple(range(k))
        if not self.window_tags:
            self.window_tags = ("none",) * k
        if len(self.slice_indices) != k or len(self.window_tags) != k:
            raise ValueError("slice_indices and window_tags need one entry per slice")
        bad = [i for i in self.key_slice_indices if not 0 <= i < k]
        if bad:
            raise ValueError(f"key slice indices {bad} outside [0, {k})")

    @property
    def n_instances(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class AttentionParams:
    V: Tensor  # (p, d)
    w: Tensor  # (p, 1)

    def __post_init__(self):
        if self.V.ndim != 2 or self.w.shape != (self.V.shape[0], 1):
            raise T.ShapeError(f"attention params: V {self.V.shape} and w {self.w.shape} disagree")

    @property
    def dim(self) -> int:
        return self.V.shape[0]


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    n_classes: int
    task_kind: str = "multilabel"
    hidden: int = ADAPTER_WIDTH
    head_hidden: int = 256
    attention_dim: int = 128

    def __post_init__(self):
        problems = []
        if self.in_dim < 1 or self.n_classes < 1 or self.head_hidden < 1 or self.attention_dim < 1:
            problems.append("in_dim, n_classes, head_hidden and attention_dim must be positive")
        if self.hidden != ADAPTER_WIDTH:
            problems.append(f"adapter width is fixed at {ADAPTER_WIDTH}, got {self.hidden}")
        if self.task_kind not in ("multilabel", "multiclass"):
            problems.append(f"task_kind must be 'multilabel' or 'multiclass', got {self.task_kind!r}")
        if self.task_kind == "multiclass" and self.n_classes < 2:
            problems.append("multiclass heads need at least two classes")
        if problems:
            raise ValueError("invalid AdapterConfig: " + "; ".join(problems))


def adapter_forward(h, weight: Tensor, bias: Tensor) -> Tensor:
    """``relu(W h + b)``; ``h`` may carry any leading batch axes."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    return T.relu(T.linear(h, weight, bias))


def _attention_logits(H: Tensor, params: AttentionParams) -> Tensor:
    # w^T tanh(V h_k) for every row h_k of H (any leading axes)
    s = T.linear(T.tanh(T.linear(H, params.V)), T.transpose(params.w))
    return T.reshape(s, s.shape[:-1])


def attention_weights(H, params: AttentionParams) -> Tensor:
    H = H if isinstance(H, Tensor) else Tensor(H)
    if H.ndim != 2 or H.shape[0] < 1:
        raise T.ShapeError(f"attention_weights expects (K>=1, d), got {H.shape}")
    return T.softmax(_attention_logits(H, params), axis=0)


def abmil_pool(H, params: AttentionParams) -> Tensor:
    """Attention-weighted sum of the rows of ``H``."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    a = attention_weights(H, params)
    return T.reshape(T.matmul(T.reshape(a, (1, H.shape[0])), H), (H.shape[1],))


class _Head(Module):
    def __init__(self, width: int, hidden: int, n_classes: int, rng: np.random.Generator):
        self.norm = LayerNorm(width)
        self.fc1 = LinearLayer(width, hidden, rng)
        self.fc2 = LinearLayer(hidden, n_classes, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(self.norm(z))))


def classify(z, head: _Head) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    return head(z)


def bce_multilabel_loss(logits: Tensor, targets) -> Tensor:
    y = np.asarray(targets, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("multilabel targets must be 0 or 1")
    return T.bce_with_logits(logits, y)


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]``; batched when ``logits`` is (B, C)."""
    c = logits.shape[-1]
    t = np.asarray(target, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError(f"class index {target} outside [0, {c})")
    logp = T.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return T.neg(logp[int(t)])
    return T.neg(T.mean(logp[np.arange(len(t)), t]))


class MILHead(Module):
    """Adapter, attention pooling and classifier as one trainable module."""

    def __init__(self, config: AdapterConfig, seed: int):
        self._config = config
        rng = np.random.default_rng(seed)
        width, p = config.hidden, config.attention_dim
        self.adapter = LinearLayer(config.in_dim, width, rng)
        self.attn_V = Tensor(glorot_uniform(rng, (p, width), width, p), requires_grad=True)
        self.attn_w = Tensor(glorot_uniform(rng, (p, 1), p, 1), requires_grad=True)
        self.head = _Head(width, config.head_hidden, config.n_classes, rng)

    @property
    def config(self) -> AdapterConfig:
        return self._config

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams(self.attn_V, self.attn_w)

    def forward_bag(self, embeddings) -> tuple[Tensor, Tensor]:
        """Logits (C,) and attention (K,) for one bag."""
        X = adapter_forward(embeddings, self.adapter.weight, self.adapter.bias)
        a = attention_weights(X, self.attention)
        z = T.reshape(T.matmul(T.reshape(a, (1, X.shape[0])), X), (X.shape[1],))
        return classify(z, self.head), a

    def forward_batch(self, H: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Logits (B, C) and attention (B, K) for zero-padded bags; ``mask`` marks real slices."""
        b, k, _ = H.shape
        X = adapter_forward(Tensor(H), self.adapter.weight, self.adapter.bias)
        s = _attention_logits(X, self.attention)
        if not mask.all():
            s = T.add(s, Tensor(np.where(mask, 0.0, _MASKED)))
        a = T.softmax(s, axis=1)
        z = T.reshape(T.bmm(T.reshape(a, (b, 1, k)), X), (b, X.shape[2]))
        return classify(z, self.head), a


def pad_bags(bags: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length bags into (B, K_max, d) plus a boolean mask."""
    kmax = max(b.shape[0] for b in bags)
    d = bags[0].shape[1]
    H = np.zeros((len(bags), kmax, d))
    mask = np.zeros((len(bags), kmax), dtype=bool)
    for i, b in enumerate(bags):
        H[i, :len(b)] = b
        mask[i, :len(b)] = True
    return H, mask
