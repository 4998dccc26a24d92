"""Glue between files on disk and the training code: volumes, samplers, embeddings and bags."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .ctio import ManifestEntry, Volume, apply_window, get_window, load_volume, read_embeddings, write_embeddings
from .mil import Bag
from .nn import Encoder, encode

__all__ = [
    "DataError",
    "resolve_path",
    "load_volumes",
    "PretrainSampler",
    "embedding_path",
    "embed_scans",
    "load_bags",
    "bag_targets",
]


class DataError(RuntimeError):
    """Missing or inconsistent input files."""


def resolve_path(manifest_path: str | Path, entry: ManifestEntry) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_volumes(manifest_path: str | Path, entries: Sequence[ManifestEntry]) -> list[Volume]:
    missing = [str(resolve_path(manifest_path, e)) for e in entries if not resolve_path(manifest_path, e).exists()]
    if missing:
        raise DataError(f"{len(missing)} volume file(s) missing: {', '.join(missing[:10])}")
    return [load_volume(resolve_path(manifest_path, e)) for e in entries]


class PretrainSampler:
    """Epoch sampler over windowed slices for contrastive pretraining.

    Every scan contributes ``per_scan`` slices per epoch: its lesion slices
    (with their boxes) first, topped up with random other slices.  Lesion
    slices are the annotated key slices plus, with ``neighbors > 0``, the
    slices within that distance of one, which reuse the key slice's box.
    Each item gets a window drawn uniformly from ``windows``.  The item count
    is the same every epoch.
    """

    def __init__(self, volumes: Sequence[Volume], entries: Sequence[ManifestEntry],
                 windows: Sequence[str] = ("abdominal", "lung"), per_scan: int = 16, seed: int = 0,
                 neighbors: int = 1):
        if per_scan < 1:
            raise ValueError("per_scan must be at least 1")
        if neighbors < 0:
            raise ValueError("neighbors must be non-negative")
        self.volumes = list(volumes)
        self.entries = list(entries)
        self.windows = [get_window(w) for w in windows]
        self.per_scan = per_scan
        self.seed = seed
        self.neighbors = neighbors
        self._boxes = [self._lesion_boxes(v, e) for v, e in zip(self.volumes, self.entries)]

    def _lesion_boxes(self, vol: Volume, e: ManifestEntry) -> dict:
        boxes = {}
        for b in e.bboxes:
            if 0 <= b.slice_index < vol.n_slices:
                boxes[b.slice_index] = b.as_tuple()
        for b in e.bboxes:
            for dz in range(1, self.neighbors + 1):
                for z in (b.slice_index - dz, b.slice_index + dz):
                    if 0 <= z < vol.n_slices and z not in boxes:
                        boxes[z] = b.as_tuple()
        return boxes

    def __len__(self) -> int:
        return len(self.volumes) * self.per_scan

    def __call__(self, epoch: int) -> list[tuple]:
        rng = np.random.default_rng((self.seed, epoch))
        items = []
        for vol, boxes in zip(self.volumes, self._boxes):
            n = vol.n_slices
            keys = sorted(boxes)[:self.per_scan]
            others = [z for z in range(n) if z not in boxes]
            extra = rng.choice(len(others), min(self.per_scan - len(keys), len(others)), replace=False)
            picks = keys + [others[i] for i in sorted(extra)]
            while len(picks) < self.per_scan:  # tiny volumes: repeat slices
                picks.append(picks[len(picks) % max(1, n)])
            for z in picks:
                w = self.windows[rng.integers(len(self.windows))]
                items.append((apply_window(vol.voxels[z], w), boxes.get(z) if z in keys else None))
        return [items[i] for i in rng.permutation(len(items))]


def embedding_path(out_dir: str | Path, scan_id: str, window: str) -> Path:
    return Path(out_dir) / f"{scan_id}.{window}.clem"


def embed_scans(encoder: Encoder, manifest_path: str | Path, entries: Sequence[ManifestEntry],
                windows: Sequence[str], out_dir: str | Path) -> list[Path]:
    """Write one embedding file per (scan, window)."""
    volumes = load_volumes(manifest_path, entries)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for vol, e in zip(volumes, entries):
        for name in windows:
            x = apply_window(vol.voxels, get_window(name))
            path = embedding_path(out, e.scan_id, name)
            write_embeddings(encode(encoder, x), path, name)
            paths.append(path)
    return paths


def bag_targets(entries: Sequence[ManifestEntry], classes: Sequence[str], task_kind: str) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    if task_kind == "multiclass":
        bad = [e.scan_id for e in entries if len(e.labels) != 1]
        if bad:
            raise DataError(f"multiclass tasks need exactly one label per scan: {', '.join(bad[:10])}")
        return np.array([index[e.labels[0]] for e in entries], dtype=np.int64)
    y = np.zeros((len(entries), len(classes)), dtype=np.int64)
    for r, e in enumerate(entries):
        for lab in e.labels:
            if lab not in index:
                raise DataError(f"scan {e.scan_id}: label {lab!r} not in vocabulary {list(classes)}")
            y[r, index[lab]] = 1
    return y


def load_bags(entries: Sequence[ManifestEntry], emb_dir: str | Path, windows: Sequence[str],
              classes: Sequence[str], task_kind: str = "multilabel") -> list[Bag]:
    """One bag per scan, the slices of every window concatenated in window order."""
    missing = [f"{e.scan_id}.{w}" for e in entries for w in windows
               if not embedding_path(emb_dir, e.scan_id, w).exists()]
    if missing:
        raise DataError(f"missing embeddings for {len(missing)} entr(y/ies): {', '.join(missing[:10])}")
    y = bag_targets(entries, classes, task_kind)
    bags = []
    for e, target in zip(entries, y):
        rows, tags, idx = [], [], []
        for w in windows:
            emb, tag = read_embeddings(embedding_path(emb_dir, e.scan_id, w))
            rows.append(emb)
            tags.extend([tag] * len(emb))
            idx.extend(range(len(emb)))
        keys = set(e.key_slices)
        key_pos = tuple(i for i, s in enumerate(idx) if s in keys)
        bags.append(Bag(np.concatenate(rows), target, key_pos, e.patient_id, tuple(tags), tuple(idx), e.scan_id))
    return bags
