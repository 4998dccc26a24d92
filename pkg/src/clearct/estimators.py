"""scikit-learn compatible wrappers for contrastive pretraining and the MIL head."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .contrastive import AugmentationSpec, ContrastiveConfig, PretrainState, run_pretraining
from .metrics import UndefinedMetricError, auc
from .mil import AdapterConfig, MILHead, bce_multilabel_loss, cross_entropy_loss, pad_bags
from .nn import CheckpointError, EncoderConfig, encode
from .optim import AdamW
from .training import EarlyStopState, bucketed_batches
from .validation import check_bag_targets, check_bags, check_slices

__all__ = ["LeCLPretrainer", "ABMILClassifier"]

_TASKS = ("multilabel", "multiclass")


class LeCLPretrainer(BaseEstimator, TransformerMixin):
    """Contrastive slice-encoder pretraining; ``transform`` returns frozen embeddings.

    ``fit`` takes windowed slices in [0, 1] and optional per-slice lesion
    boxes ``(x0, y0, x1, y1)`` (None for slices without an annotated lesion).
    """

    def __init__(self, kind="gated-conv", input_size=(64, 64), embed_dim=64, depth=2, channels=16,
                 patch_size=8, projection_hidden=128, pool="avgmax", method="lecl", lam=0.0, tau=0.2,
                 momentum=0.99, key_queue_size=256, lesion_queue_size=64, batch_size=64, pairing="lesion",
                 view_roles="key-crop", lr=1e-4, warmup_epochs=10, weight_decay=0.01, epochs=20,
                 augmentation=None, random_state=0):
        self.kind = kind
        self.input_size = input_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.channels = channels
        self.patch_size = patch_size
        self.projection_hidden = projection_hidden
        self.pool = pool
        self.method = method
        self.lam = lam
        self.tau = tau
        self.momentum = momentum
        self.key_queue_size = key_queue_size
        self.lesion_queue_size = lesion_queue_size
        self.batch_size = batch_size
        self.pairing = pairing
        self.view_roles = view_roles
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.augmentation = augmentation
        self.random_state = random_state

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(kind=self.kind, input_size=tuple(self.input_size), embed_dim=self.embed_dim,
                             depth=self.depth, patch_size=self.patch_size, channels=self.channels,
                             projection_hidden=self.projection_hidden, pool=self.pool).validate()

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, momentum=self.momentum, lam=self.lam,
                                 key_queue_size=self.key_queue_size, lesion_queue_size=self.lesion_queue_size,
                                 batch_size=self.batch_size, method=self.method, pairing=self.pairing,
                                 view_roles=self.view_roles, lr=self.lr, warmup_epochs=self.warmup_epochs,
                                 weight_decay=self.weight_decay)

    def fit(self, X, y=None, bboxes=None):
        X = check_slices(X, self.input_size)
        if bboxes is None:
            bboxes = [None] * len(X)
        if len(bboxes) != len(X):
            raise ValueError(f"got {len(bboxes)} bboxes for {len(X)} slices")
        items = list(zip(X, bboxes))

        def sample_epoch(epoch):
            order = np.random.default_rng((self.random_state, epoch)).permutation(len(items))
            return [items[i] for i in order]

        return self.fit_sampler(sample_epoch)

    def fit_sampler(self, sample_epoch: Callable[[int], Sequence[tuple]], on_step=None,
                    state: PretrainState | None = None):
        """Train from an epoch sampler returning ``(slice, bbox_or_None)`` items.

        Passing a ``state`` resumes an interrupted run.
        """
        cfg = self.contrastive_config()
        if state is None:
            state = PretrainState.create(self.encoder_config(), cfg, self.random_state)
        aug = self.augmentation if self.augmentation is not None else AugmentationSpec()
        self.state_ = run_pretraining(state, sample_epoch, cfg, self.epochs, aug, self.random_state, on_step)
        self.loss_curve_ = [row["loss"] for row in self.state_.log]
        return self

    @property
    def encoder_(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("LeCLPretrainer is not fitted yet")
        return self.state_.pair.query_encoder

    def transform(self, X):
        X = check_slices(X, self.input_size)
        return encode(self.encoder_, X)


class ABMILClassifier(BaseEstimator, ClassifierMixin):
    """Attention-MIL classifier over bags of frozen slice embeddings.

    ``X`` is a sequence of (K_i, d) arrays (or :class:`~clearct.mil.Bag`).
    For ``task_kind="multilabel"`` ``y`` is a binary (n_bags, n_classes)
    matrix and the loss is binary cross-entropy; for ``"multiclass"`` it is a
    vector of class indices with a softmax cross-entropy loss.

    With an ``eval_set`` the validation macro AUC drives early stopping and
    the best epoch's weights are kept.
    """

    def __init__(self, task_kind="multilabel", attention_dim=128, head_hidden=256, lr=1e-4, batch_size=128,
                 max_epochs=32, patience=8, weight_decay=0.01, standardize=True, threshold=0.5,
                 n_classes=None, random_state=0):
        self.task_kind = task_kind
        self.attention_dim = attention_dim
        self.head_hidden = head_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.threshold = threshold
        self.n_classes = n_classes
        self.random_state = random_state

    # -- fitting ------------------------------------------------------------

    def _prep(self, bags: list[np.ndarray]) -> list[np.ndarray]:
        return [(b - self.mean_) / self.scale_ for b in bags]

    def _loss(self, logits: T.Tensor, y: np.ndarray) -> T.Tensor:
        if self.task_kind == "multilabel":
            return bce_multilabel_loss(logits, y)
        return cross_entropy_loss(logits, y)

    def _val_score(self, bags: list[np.ndarray], y: np.ndarray) -> float:
        proba = self._proba(bags)
        if self.task_kind == "multiclass":
            y = np.eye(self.n_classes_, dtype=np.int64)[y]
            if self.n_classes_ == 2:
                proba, y = proba[:, 1:], y[:, 1:]
        aucs = []
        for c in range(proba.shape[1]):
            try:
                aucs.append(auc(proba[:, c], y[:, c]))
            except UndefinedMetricError:
                pass
        if aucs:
            return float(np.mean(aucs))
        T.reset_tape()
        with T.no_grad():
            H, mask = pad_bags(bags)
            logits, _ = self.head_.forward_batch(H, mask)
            return -self._loss(logits, y if self.task_kind == "multilabel" else np.argmax(y, 1)).item()

    def fit(self, X, y, eval_set=None):
        bags = check_bags(X)
        y = check_bag_targets(y, len(bags), self.task_kind)
        if self.task_kind == "multilabel":
            self.n_classes_ = y.shape[1]
        else:
            self.n_classes_ = int(self.n_classes or y.max() + 1)
        self.classes_ = np.arange(self.n_classes_)
        self.n_features_in_ = bags[0].shape[1]
        if self.standardize:
            stacked = np.concatenate(bags)
            self.mean_ = stacked.mean(axis=0)
            self.scale_ = stacked.std(axis=0) + 1e-8
        else:
            self.mean_ = np.zeros(self.n_features_in_)
            self.scale_ = np.ones(self.n_features_in_)
        bags = self._prep(bags)
        val = None
        if eval_set is not None:
            Xv, yv = eval_set
            val = (self._prep(check_bags(Xv, self.n_features_in_)), check_bag_targets(yv, len(Xv), self.task_kind))

        cfg = AdapterConfig(self.n_features_in_, self.n_classes_, self.task_kind, head_hidden=self.head_hidden,
                            attention_dim=self.attention_dim)
        self.head_ = MILHead(cfg, self.random_state)
        opt = AdamW(self.head_.parameters(), weight_decay=self.weight_decay)
        rng = np.random.default_rng(self.random_state)
        stopper = EarlyStopState(self.patience, self.max_epochs)
        lengths = [len(b) for b in bags]
        best = None
        self.history_ = []
        for epoch in range(self.max_epochs):
            losses = []
            for idx in bucketed_batches(lengths, self.batch_size, rng):
                H, mask = pad_bags([bags[i] for i in idx])
                T.reset_tape()
                logits, _ = self.head_.forward_batch(H, mask)
                loss = self._loss(logits, y[idx])
                T.backward(loss)
                T.reset_tape()
                opt.step(self.lr)
                losses.append(loss.item())
            record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if val is not None:
                score = self._val_score(*val)
                record["val_score"] = score
                stop = stopper.update(epoch, score)
                if stopper.improved_last:
                    best = [p.data for p in self.head_.parameters()]
            else:
                stop = False
            self.history_.append(record)
            if stop:
                break
        if best is not None:
            for p, data in zip(self.head_.parameters(), best):
                p.data = data
        self.early_stop_ = stopper
        self.best_epoch_ = stopper.best_epoch if val is not None else len(self.history_) - 1
        return self

    # -- inference ----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "head_"):
            raise NotFittedError("ABMILClassifier is not fitted yet")

    def _forward(self, bags: list[np.ndarray], batch_size: int = 256):
        logits, attn = [], []
        with T.no_grad():
            for i in range(0, len(bags), batch_size):
                chunk = bags[i:i + batch_size]
                H, mask = pad_bags(chunk)
                lg, a = self.head_.forward_batch(H, mask)
                logits.append(lg.data)
                attn.extend(a.data[j, :len(b)] for j, b in enumerate(chunk))
        return np.concatenate(logits), attn

    def _proba(self, bags: list[np.ndarray]) -> np.ndarray:
        logits, _ = self._forward(bags)
        if self.task_kind == "multilabel":
            return 0.5 * (1.0 + np.tanh(0.5 * logits))
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        return self._forward(self._prep(check_bags(X, self.n_features_in_)))[0]

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        return self._proba(self._prep(check_bags(X, self.n_features_in_)))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        if self.task_kind == "multilabel":
            return (proba >= self.threshold).astype(np.int64)
        return np.argmax(proba, axis=1)

    def attention(self, X) -> list[np.ndarray]:
        """Softmax attention weights over the slices of each bag."""
        self._check_fitted()
        return self._forward(self._prep(check_bags(X, self.n_features_in_)))[1]

    # -- persistence --------------------------------------------------------

    def to_arrays(self) -> dict:
        """Fitted state as named float64 arrays for a CLWT checkpoint."""
        self._check_fitted()
        arrays = {
            "mil/config/in_dim": np.array([float(self.n_features_in_)]),
            "mil/config/n_classes": np.array([float(self.n_classes_)]),
            "mil/config/task_kind": np.array([float(_TASKS.index(self.task_kind))]),
            "mil/config/attention_dim": np.array([float(self.attention_dim)]),
            "mil/config/head_hidden": np.array([float(self.head_hidden)]),
            "mil/config/threshold": np.array([float(self.threshold)]),
            "mil/mean": self.mean_,
            "mil/scale": self.scale_,
        }
        for name, p in self.head_.named_parameters():
            arrays[f"mil/{name}"] = p.data
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ABMILClassifier":
        try:
            cfg = {k: arrays[f"mil/config/{k}"][0] for k in
                   ("in_dim", "n_classes", "task_kind", "attention_dim", "head_hidden", "threshold")}
            model = cls(task_kind=_TASKS[int(cfg["task_kind"])], attention_dim=int(cfg["attention_dim"]),
                        head_hidden=int(cfg["head_hidden"]), threshold=float(cfg["threshold"]))
            model.n_features_in_ = int(cfg["in_dim"])
            model.n_classes_ = int(cfg["n_classes"])
            model.classes_ = np.arange(model.n_classes_)
            model.mean_ = arrays["mil/mean"]
            model.scale_ = arrays["mil/scale"]
            model.head_ = MILHead(AdapterConfig(model.n_features_in_, model.n_classes_, model.task_kind,
                                                head_hidden=model.head_hidden,
                                                attention_dim=model.attention_dim), 0)
            for name, p in model.head_.named_parameters():
                value = arrays[f"mil/{name}"]
                if value.shape != p.shape:
                    raise CheckpointError(f"parameter {name}: shape {value.shape} != {p.shape}")
                p.data = value
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing entry {exc.args[0]!r}") from None
        return model

    def score(self, X, y, sample_weight=None):
        """Macro ROC AUC over the classes with both labels present."""
        proba = self.predict_proba(X)
        y = np.asarray(y)
        if self.task_kind == "multiclass":
            y = np.eye(self.n_classes_, dtype=np.int64)[y]
        vals = []
        for c in range(proba.shape[1]):
            try:
                vals.append(auc(proba[:, c], y[:, c]))
            except UndefinedMetricError:
                pass
        return float(np.mean(vals)) if vals else math.nan
