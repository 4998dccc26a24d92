"""Config-driven pipeline stages shared by the command line and the test-suite."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .contrastive import AugmentationSpec, ContrastiveConfig, LOG_HEADER, PretrainState, run_pretraining
from .ctio import (DEFAULT_LESION_CLASSES, ManifestEntry, SyntheticSpec, Volume, apply_window, get_window,
                   load_dataset_info)
from .harness import SplitPlan, check_manifest_splits, make_splits, train_downstream
from .mil import Bag
from .nn import Encoder, EncoderConfig, encode
from .pipeline import PretrainSampler, bag_targets

__all__ = [
    "synthetic_spec",
    "encoder_config",
    "contrastive_config",
    "split_plan",
    "pretrain_entries",
    "pretrain",
    "embed_volume",
    "bags_in_memory",
    "downstream",
    "run_in_memory",
    "read_loss_log",
]


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    d = cfg["data"]
    n = d["image_size"]
    return SyntheticSpec(n_patients=d["n_patients"], slices_per_scan=d["slices_per_scan"], image_size=(n, n),
                         lesion_classes=DEFAULT_LESION_CLASSES, class_prob=d["class_prob"],
                         max_classes_per_scan=d["max_classes_per_scan"], noise_sigma=d["noise_sigma"],
                         multilabel=d["multilabel"], seed=d["seed"]).validate()


def encoder_config(cfg: RunConfig, input_size: tuple) -> EncoderConfig:
    p = cfg["pretrain"]
    return EncoderConfig(kind=p["encoder"], input_size=tuple(input_size), embed_dim=p["embed_dim"],
                         depth=p["depth"], patch_size=p["patch_size"], channels=p["channels"],
                         projection_hidden=p["projection_hidden"]).validate()


def contrastive_config(cfg: RunConfig) -> ContrastiveConfig:
    p = cfg["pretrain"]
    return ContrastiveConfig(tau=p["tau"], momentum=p["momentum"], lam=p["lambda"],
                             key_queue_size=p["key_queue_size"], lesion_queue_size=p["lesion_queue_size"],
                             batch_size=p["batch_size"], method=p["method"], pairing=p["pairing"],
                             view_roles=p["view_roles"], lr=p["lr"], warmup_epochs=p["warmup_epochs"],
                             weight_decay=p["weight_decay"])


def split_plan(cfg: RunConfig, entries: Sequence[ManifestEntry]) -> SplitPlan:
    """Split plan from ``[eval]``; manifest test assignments are honoured when present."""
    e = cfg["eval"]
    check_manifest_splits(entries)
    fixed_test = {x.patient_id for x in entries if x.split == "test"}
    ids = [x.patient_id for x in entries]
    if e["scheme"] == "heldout+kfold" and fixed_test:
        return make_splits(ids, e["scheme"], e["k"], seed=e["seed"], test_ids=fixed_test)
    return make_splits(ids, e["scheme"], e["k"], e["test_frac"], e["seed"])


def pretrain_entries(cfg: RunConfig, entries: Sequence[ManifestEntry]) -> list[int]:
    """Indices of the scans used for pretraining: everything outside a held-out test set."""
    plan = split_plan(cfg, entries)
    if plan.scheme == "heldout+kfold":
        return [i for i, e in enumerate(entries) if e.patient_id not in plan.test_patient_ids]
    return list(range(len(entries)))


def pretrain(cfg: RunConfig, volumes: Sequence[Volume], entries: Sequence[ManifestEntry],
             state: PretrainState | None = None, on_step: Callable[[dict], None] | None = None) -> PretrainState:
    p = cfg["pretrain"]
    idx = pretrain_entries(cfg, entries)
    sampler = PretrainSampler([volumes[i] for i in idx], [entries[i] for i in idx], p["windows"],
                              p["slices_per_scan"], p["seed"], p["lesion_neighbors"])
    ccfg = contrastive_config(cfg)
    if state is None:
        state = PretrainState.create(encoder_config(cfg, volumes[0].voxels.shape[1:]), ccfg, p["seed"])
    return run_pretraining(state, sampler, ccfg, p["epochs"], AugmentationSpec(), p["seed"], on_step)


def embed_volume(encoder: Encoder, volume: Volume, window: str) -> np.ndarray:
    """Embeddings at the stored float32 precision."""
    return encode(encoder, apply_window(volume.voxels, get_window(window))).astype(np.float32).astype(np.float64)


def bags_in_memory(encoder: Encoder, volumes: Sequence[Volume], entries: Sequence[ManifestEntry],
                   windows: Sequence[str], classes: Sequence[str], task_kind: str = "multilabel") -> list[Bag]:
    y = bag_targets(entries, classes, task_kind)
    bags = []
    for vol, e, target in zip(volumes, entries, y):
        rows = [embed_volume(encoder, vol, w) for w in windows]
        n = vol.n_slices
        idx = [s for _ in windows for s in range(n)]
        tags = tuple(w for w in windows for _ in range(n))
        keys = set(e.key_slices)
        bags.append(Bag(np.concatenate(rows), target, tuple(i for i, s in enumerate(idx) if s in keys),
                        e.patient_id, tags, tuple(idx), e.scan_id))
    return bags


def downstream(cfg: RunConfig, bags: Sequence[Bag], entries: Sequence[ManifestEntry], classes: Sequence[str],
               encoder: Encoder | None = None):
    d, e = cfg["downstream"], cfg["eval"]
    plan = split_plan(cfg, entries)
    head = dict(lr=d["lr"], batch_size=d["batch_size"], max_epochs=d["max_epochs"], patience=d["patience"],
                attention_dim=d["attention_dim"], head_hidden=d["head_hidden"], weight_decay=d["weight_decay"],
                standardize=d["standardize"], threshold=e["threshold"])
    result = train_downstream(bags, plan, classes, d["task_kind"], head, d["seed"], encoder,
                              e["degenerate_as_half"])
    return plan, result


def run_in_memory(cfg: RunConfig, volumes: Sequence[Volume] | None = None,
                  entries: Sequence[ManifestEntry] | None = None, classes: Sequence[str] | None = None):
    """Synthesise (unless data is given), pretrain, embed and train without touching disk.

    Returns ``(state, bags, plan, result)``.
    """
    if volumes is None:
        from .ctio import generate_synthetic
        spec = synthetic_spec(cfg)
        volumes, entries = generate_synthetic(spec)
        classes = spec.class_names
    state = pretrain(cfg, volumes, entries)
    enc = state.pair.query_encoder
    bags = bags_in_memory(enc, volumes, entries, cfg["downstream"]["windows"], classes,
                          cfg["downstream"]["task_kind"])
    plan, result = downstream(cfg, bags, entries, classes, enc)
    return state, bags, plan, result


def read_loss_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"{path}: not a loss log")
    rows = []
    for line in lines[1:]:
        step, epoch, loss, lr, ql, lql = line.split(",")
        rows.append({"step": int(step), "epoch": int(epoch), "loss": float(loss), "lr": float(lr),
                     "queue_len": int(ql), "lesion_queue_len": int(lql)})
    return rows


def classes_for(manifest_path: str | Path) -> tuple[list[str], str]:
    info = load_dataset_info(manifest_path)
    return list(info["classes"]), ("multilabel" if info.get("multilabel", True) else "multiclass")
