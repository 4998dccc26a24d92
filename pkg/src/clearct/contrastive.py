"""Momentum-contrast pretraining with the lesion-weighted InfoNCE objective.

The query encoder is trained by gradient descent; the key (momentum)
encoder is an exponential moving average of it.  Negatives come from the
other keys of the batch and from a FIFO queue of earlier keys.  Lesion
slices additionally feed a separate FIFO of lesion-crop key embeddings
whose similarity to the query is added, weighted by ``lam``, to the loss
denominator.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Encoder, EncoderConfig, encoder_from_arrays, encoder_to_arrays
from .optim import AdamW, warmup_cosine
from .tensor import Tensor

__all__ = [
    "ContrastiveConfig",
    "AugmentationSpec",
    "SlicePair",
    "EmbeddingQueue",
    "LesionQueue",
    "MomentumPair",
    "psi",
    "info_nce",
    "lecl_loss",
    "batch_contrastive_loss",
    "momentum_update",
    "resize_bilinear",
    "lesion_crop_box",
    "make_views",
    "pretrain_step",
    "PretrainState",
    "run_pretraining",
    "LOG_HEADER",
]

LAMBDA_PRESETS = (0.0, 1.0, 3.0, 5.0)
LOG_HEADER = "step,epoch,loss,lr,queue_len,lesion_queue_len"


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    momentum: float = 0.99
    lam: float = 0.0
    key_queue_size: int = 256
    lesion_queue_size: int = 64
    batch_size: int = 64
    method: str = "lecl"  # "lecl" or "moco"
    pairing: str = "lesion"  # "lesion" crops key views around bboxes; "none" never does
    view_roles: str = "key-crop"  # which encoder sees the lesion crop
    in_batch_negatives: bool = True
    lr: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 0.01

    def __post_init__(self):
        problems = []
        if not self.tau > 0:
            problems.append(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lam < 0:
            problems.append(f"lambda must be non-negative, got {self.lam}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.key_queue_size < self.batch_size:
            problems.append(f"key_queue_size {self.key_queue_size} is smaller than batch_size {self.batch_size}")
        if self.lesion_queue_size < 1:
            problems.append(f"lesion_queue_size must be positive, got {self.lesion_queue_size}")
        if self.method not in ("lecl", "moco"):
            problems.append(f"method must be 'lecl' or 'moco', got {self.method!r}")
        if self.pairing not in ("lesion", "none"):
            problems.append(f"pairing must be 'lesion' or 'none', got {self.pairing!r}")
        if self.view_roles not in ("key-crop", "query-crop"):
            problems.append(f"view_roles must be 'key-crop' or 'query-crop', got {self.view_roles!r}")
        if problems:
            raise ValueError("invalid ContrastiveConfig: " + "; ".join(problems))

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.method == "moco" else self.lam


# -- similarity and losses ---------------------------------------------------


def _vec(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def psi(x1, x2, tau: float) -> Tensor:
    """``exp(cos(x1, x2) / tau)``."""
    return T.exp(T.mul(T.cosine_similarity(_vec(x1), _vec(x2)), 1.0 / tau))


def _sims(q: Tensor, vecs: Sequence, tau: float) -> Tensor:
    return T.mul(T.stack([T.cosine_similarity(q, _vec(v)) for v in vecs]), 1.0 / tau)


def info_nce(q, keys: Sequence, pos_index: int, tau: float) -> Tensor:
    """``-log(psi(q, k+) / sum_i psi(q, k_i))`` evaluated in log-sum-exp form."""
    if len(keys) == 0:
        raise ValueError("info_nce needs at least one key")
    if not 0 <= pos_index < len(keys):
        raise IndexError(f"pos_index {pos_index} outside [0, {len(keys)})")
    q = _vec(q)
    logits = _sims(q, keys, tau)
    return T.sub(T.logsumexp(logits, axis=0), logits[pos_index])


def lecl_loss(q, keys: Sequence, pos_index: int, lesions, lam: float, tau: float) -> Tensor:
    """InfoNCE with ``lam * sum_j psi(q, l_j)`` added to the denominator."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    lesion_vecs = lesions.as_list() if isinstance(lesions, EmbeddingQueue) else list(lesions)
    if lam == 0 or not lesion_vecs:
        return info_nce(q, keys, pos_index, tau)
    if len(keys) == 0:
        raise ValueError("lecl_loss needs at least one key")
    if not 0 <= pos_index < len(keys):
        raise IndexError(f"pos_index {pos_index} outside [0, {len(keys)})")
    q = _vec(q)
    logits = _sims(q, keys, tau)
    lesion_logits = T.add(_sims(q, lesion_vecs, tau), math.log(lam))
    return T.sub(T.logsumexp(T.concat([logits, lesion_logits]), axis=0), logits[pos_index])


def batch_contrastive_loss(q: Tensor, k: np.ndarray, queue: np.ndarray, lesions: np.ndarray,
                           lam: float, tau: float, in_batch_negatives: bool = True) -> Tensor:
    """Mean lesion-weighted InfoNCE over a batch.

    ``q`` holds unit-norm queries (B, d); ``k`` the matching unit-norm keys.
    Row ``i`` uses key ``i`` as its positive and, as negatives, the other
    batch keys (when ``in_batch_negatives``) plus every queued key.
    """
    b = q.shape[0]
    inv = 1.0 / tau
    if in_batch_negatives:
        bank = np.concatenate([k, queue]) if len(queue) else k
        logits = T.mul(T.matmul(q, Tensor(bank.T)), inv)
        pos = logits[np.arange(b), np.arange(b)]
    else:
        pos = T.mul(T.sum(T.mul(q, Tensor(k)), axis=1), inv)
        logits = T.reshape(pos, (b, 1))
        if len(queue):
            logits = T.concat([logits, T.mul(T.matmul(q, Tensor(queue.T)), inv)], axis=1)
    if lam > 0 and len(lesions):
        lesion_logits = T.add(T.mul(T.matmul(q, Tensor(lesions.T)), inv), math.log(lam))
        logits = T.concat([logits, lesion_logits], axis=1)
    return T.mean(T.sub(T.logsumexp(logits, axis=1), pos))


# -- queues and the momentum pair --------------------------------------------


class EmbeddingQueue:
    """Bounded FIFO of detached, L2-normalised embedding rows."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._buf: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, rows) -> None:
        rows = np.atleast_2d(np.asarray(rows.data if isinstance(rows, Tensor) else rows, dtype=np.float64))
        if rows.size == 0:
            return
        if rows.shape[1] != self.dim:
            raise T.ShapeError(f"queue holds {self.dim}-dim rows, got {rows.shape[1]}")
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise T.DomainError("cannot enqueue a zero embedding")
        for r in rows / norms:
            self._buf.append(r.copy())

    def restore(self, rows) -> None:
        """Replace the contents with saved rows, kept bit for bit."""
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.dim)
        self._buf.clear()
        for r in rows[-self.capacity:]:
            self._buf.append(r.copy())

    def array(self) -> np.ndarray:
        if not self._buf:
            return np.zeros((0, self.dim))
        return np.stack(self._buf)

    def as_list(self) -> list[np.ndarray]:
        return list(self._buf)

    def clear(self) -> None:
        self._buf.clear()


class LesionQueue(EmbeddingQueue):
    """Key-encoder embeddings of lesion-centred crops."""


class MomentumPair:
    """Trainable query encoder plus its gradient-free EMA copy."""

    def __init__(self, query_encoder: Encoder, key_encoder: Encoder | None = None):
        self.query_encoder = query_encoder
        if key_encoder is None:
            key_encoder = encoder_from_arrays(encoder_to_arrays(query_encoder))
        if key_encoder.config != query_encoder.config:
            raise ValueError("query and key encoders must share one architecture")
        self.key_encoder = key_encoder.requires_grad_(False)

    @classmethod
    def create(cls, config: EncoderConfig, seed: int) -> "MomentumPair":
        return cls(Encoder(config, seed))


def momentum_update(pair: MomentumPair, m: float) -> None:
    """``theta_k <- m * theta_k + (1 - m) * theta_q`` for every parameter."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {m}")
    for (name_q, pq), (name_k, pk) in zip(pair.query_encoder.named_parameters(),
                                          pair.key_encoder.named_parameters()):
        if name_q != name_k or pq.shape != pk.shape:
            raise ValueError(f"parameter mismatch between encoders: {name_q} vs {name_k}")
        pk.data = m * pk.data + (1.0 - m) * pq.data
        pk.requires_grad = False
        pk.grad = None


# -- views -------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    crop_scale: tuple | None = (0.4, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: float = 0.1
    noise_sigma: float = 0.01
    lesion_margin: float = 1.5
    lesion_crop_scale: float | None = None  # fixed crop side as a fraction of the image

    @classmethod
    def identity(cls, **overrides) -> "AugmentationSpec":
        base = dict(crop_scale=None, flip_p=0.0, jitter=0.0, noise_sigma=0.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class SlicePair:
    query_view: np.ndarray
    key_view: np.ndarray
    has_lesion: bool = False
    bbox: tuple | None = None

    def __post_init__(self):
        if self.has_lesion != (self.bbox is not None):
            raise ValueError("bbox must be present exactly when has_lesion is set")


def resize_bilinear(img: np.ndarray, box: tuple, out_shape: tuple) -> np.ndarray:
    """Sample ``box = (x0, y0, x1, y1)`` of ``img`` onto an ``out_shape`` grid.

    Pixel centres are mapped half-pixel aligned and samples are clamped to the
    box, so an integer box gives exactly crop-then-resize with edge clamping.
    """
    h, w = img.shape
    oh, ow = out_shape
    x0, y0, x1, y1 = box
    xs = x0 + (np.arange(ow) + 0.5) * (x1 - x0) / ow - 0.5
    ys = y0 + (np.arange(oh) + 0.5) * (y1 - y0) / oh - 0.5
    xs = np.clip(xs, max(x0, 0), max(min(x1 - 1, w - 1), max(x0, 0)))
    ys = np.clip(ys, max(y0, 0), max(min(y1 - 1, h - 1), max(y0, 0)))
    xi, yi = np.minimum(np.floor(xs).astype(int), w - 2 if w > 1 else 0), np.minimum(np.floor(ys).astype(int), h - 2 if h > 1 else 0)
    fx, fy = xs - xi, ys - yi
    xj, yj = np.minimum(xi + 1, w - 1), np.minimum(yi + 1, h - 1)
    top = img[yi][:, xi] * (1 - fx) + img[yi][:, xj] * fx
    bot = img[yj][:, xi] * (1 - fx) + img[yj][:, xj] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def lesion_crop_box(bbox: tuple, shape: tuple, margin: float = 1.5, scale: float | None = None) -> tuple:
    """Square crop centred on the bbox, shifted to stay inside the image."""
    h, w = shape
    x0, y0, x1, y1 = bbox
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"bbox {bbox} has zero area")
    if not (0 <= x0 and 0 <= y0 and x1 <= w and y1 <= h):
        raise ValueError(f"bbox {bbox} lies outside a {h}x{w} image")
    side = scale * min(h, w) if scale is not None else margin * max(x1 - x0, y1 - y0)
    side = min(side, h, w)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    cx = min(max(cx, side / 2), w - side / 2)
    cy = min(max(cy, side / 2), h - side / 2)
    return cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2


def _random_crop_box(rng: np.random.Generator, shape: tuple, aug: AugmentationSpec) -> tuple:
    h, w = shape
    area = rng.uniform(*aug.crop_scale) * h * w
    ratio = math.exp(rng.uniform(math.log(aug.crop_ratio[0]), math.log(aug.crop_ratio[1])))
    cw = min(math.sqrt(area * ratio), w)
    ch = min(math.sqrt(area / ratio), h)
    x0 = rng.uniform(0, w - cw)
    y0 = rng.uniform(0, h - ch)
    return x0, y0, x0 + cw, y0 + ch


def _photometric(rng: np.random.Generator, img: np.ndarray, aug: AugmentationSpec) -> np.ndarray:
    flip = rng.random() < aug.flip_p
    shift = rng.uniform(-aug.jitter, aug.jitter) if aug.jitter else 0.0
    if flip:
        img = img[:, ::-1]
    if shift:
        img = img + shift
    if aug.noise_sigma:
        img = img + rng.normal(0.0, aug.noise_sigma, size=img.shape)
    if flip or shift or aug.noise_sigma:
        img = np.clip(img, 0.0, 1.0)
    return np.array(img, dtype=np.float64)


def _augmented(rng: np.random.Generator, img: np.ndarray, aug: AugmentationSpec, crop: bool) -> np.ndarray:
    if crop and aug.crop_scale is not None:
        img = resize_bilinear(img, _random_crop_box(rng, img.shape, aug), img.shape)
    return _photometric(rng, img, aug)


def make_views(slice_: np.ndarray, bbox: tuple | None, aug: AugmentationSpec, seed,
               view_roles: str = "key-crop") -> SlicePair:
    """Two views of one windowed slice.

    With a bbox, one view is the lesion-centred crop resized to full size and
    the other is the whole slice with photometric augmentation only;
    ``view_roles`` decides which of them the key encoder sees.  Without a
    bbox both views are independent random-resized-crop augmentations.
    """
    img = np.asarray(slice_, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if bbox is None:
        return SlicePair(_augmented(rng, img, aug, True), _augmented(rng, img, aug, True))
    bbox = tuple(int(v) for v in bbox)
    box = lesion_crop_box(bbox, img.shape, aug.lesion_margin, aug.lesion_crop_scale)
    full = _augmented(rng, img, aug, False)
    crop = _photometric(rng, resize_bilinear(img, box, img.shape), aug)
    if view_roles == "key-crop":
        return SlicePair(full, crop, True, bbox)
    return SlicePair(crop, full, True, bbox)


# -- training ----------------------------------------------------------------


def pretrain_step(pair: MomentumPair, batch: Sequence[SlicePair], cfg: ContrastiveConfig,
                  key_queue: EmbeddingQueue, lesions: LesionQueue, optimizer: AdamW, lr: float | None = None) -> float:
    """One optimisation step; returns the mean batch loss."""
    if not batch:
        raise ValueError("pretrain_step needs a non-empty batch")
    T.reset_tape()
    qv = Tensor(np.stack([p.query_view for p in batch]))
    kv = np.stack([p.key_view for p in batch])
    with T.no_grad():
        k = T.l2_normalize(pair.key_encoder(Tensor(kv)), axis=-1).data
    q = T.l2_normalize(pair.query_encoder(qv), axis=-1)
    loss = batch_contrastive_loss(q, k, key_queue.array(), lesions.array(), cfg.effective_lambda, cfg.tau,
                                  cfg.in_batch_negatives)
    T.backward(loss)
    T.reset_tape()
    optimizer.step(cfg.lr if lr is None else lr)
    momentum_update(pair, cfg.momentum)
    key_queue.push(k)
    lesion_rows = [i for i, p in enumerate(batch) if p.has_lesion]
    if lesion_rows:
        lesions.push(k[lesion_rows])
    return loss.item()


@dataclass
class PretrainState:
    pair: MomentumPair
    optimizer: AdamW
    key_queue: EmbeddingQueue
    lesion_queue: LesionQueue
    step: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, cfg: ContrastiveConfig, seed: int) -> "PretrainState":
        pair = MomentumPair.create(enc_cfg, seed)
        opt = AdamW(pair.query_encoder.parameters(), weight_decay=cfg.weight_decay)
        d = enc_cfg.embed_dim
        return cls(pair, opt, EmbeddingQueue(cfg.key_queue_size, d), LesionQueue(cfg.lesion_queue_size, d))

    def to_arrays(self) -> dict:
        arrays = dict(encoder_to_arrays(self.pair.query_encoder))
        arrays.update(encoder_to_arrays(self.pair.key_encoder, prefix="key/"))
        arrays.update(self.optimizer.state_arrays())
        arrays["state/step"] = np.array([float(self.step)])
        arrays["state/epoch"] = np.array([float(self.epoch)])
        arrays["state/key_queue"] = self.key_queue.array()
        arrays["state/lesion_queue"] = self.lesion_queue.array()
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict, cfg: ContrastiveConfig) -> "PretrainState":
        query = encoder_from_arrays(arrays)
        key = encoder_from_arrays(arrays, prefix="key/")
        pair = MomentumPair(query, key)
        opt = AdamW(query.parameters(), weight_decay=cfg.weight_decay)
        opt.load_state_arrays(arrays)
        d = query.config.embed_dim
        kq, lq = EmbeddingQueue(cfg.key_queue_size, d), LesionQueue(cfg.lesion_queue_size, d)
        kq.restore(arrays["state/key_queue"])
        lq.restore(arrays["state/lesion_queue"])
        return cls(pair, opt, kq, lq, int(arrays["state/step"][0]), int(arrays["state/epoch"][0]))


EpochSampler = Callable[[int], Sequence[tuple]]


def run_pretraining(state: PretrainState, sample_epoch: EpochSampler, cfg: ContrastiveConfig, epochs: int,
                    aug: AugmentationSpec, seed: int, on_step: Callable[[dict], None] | None = None) -> PretrainState:
    """Train from ``state.epoch`` up to ``epochs``.

    ``sample_epoch(e)`` returns the epoch's items as ``(image, bbox_or_None)``
    tuples; the item count must not change between epochs.  Views are seeded
    from ``(seed, epoch, position)`` so a resumed run replays exactly.
    """
    steps_per_epoch = None
    while state.epoch < epochs:
        items = list(sample_epoch(state.epoch))
        if steps_per_epoch is None:
            steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
        total = steps_per_epoch * epochs
        warmup = steps_per_epoch * cfg.warmup_epochs
        for start in range(0, len(items), cfg.batch_size):
            chunk = items[start:start + cfg.batch_size]
            batch = []
            for pos, (img, bbox) in enumerate(chunk, start=start):
                use_bbox = bbox if cfg.pairing == "lesion" else None
                pair = make_views(img, use_bbox, aug, (seed, state.epoch, pos), cfg.view_roles)
                if bbox is not None and use_bbox is None:
                    pair = SlicePair(pair.query_view, pair.key_view, True, tuple(int(v) for v in bbox))
                batch.append(pair)
            lr = warmup_cosine(state.step, total, warmup, cfg.lr)
            loss = pretrain_step(state.pair, batch, cfg, state.key_queue, state.lesion_queue, state.optimizer, lr)
            row = {"step": state.step, "epoch": state.epoch, "loss": loss, "lr": lr,
                   "queue_len": len(state.key_queue), "lesion_queue_len": len(state.lesion_queue)}
            state.log.append(row)
            if on_step is not None:
                on_step(row)
            state.step += 1
        state.epoch += 1
    return state


def format_log_row(row: dict) -> str:
    return (f"{row['step']},{row['epoch']},{row['loss']!r},{row['lr']!r},"
            f"{row['queue_len']},{row['lesion_queue_len']}")


def iter_log_lines(rows: Iterable[dict]) -> Iterable[str]:
    yield LOG_HEADER
    for row in rows:
        yield format_log_row(row)
