"""INI run configuration: ``[data]``, ``[pretrain]``, ``[downstream]`` and ``[eval]`` sections.

Every key is checked against :data:`SCHEMA`; unknown sections or keys are
rejected.  ``RunConfig.dumps`` writes the fully resolved configuration,
defaults included, in the same format.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

__all__ = ["ConfigError", "Key", "SCHEMA", "RunConfig"]


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str_list(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _float_list(s: str) -> tuple:
    return tuple(float(p) for p in _str_list(s))


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _nonneg(cast):
    def parse(s: str):
        v = cast(s)
        if v < 0:
            raise ValueError(f"must be non-negative, got {v}")
        return v
    return parse


def _pos(cast):
    def parse(s: str):
        v = cast(s)
        if v <= 0:
            raise ValueError(f"must be positive, got {v}")
        return v
    return parse


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "root": Key(str, "", "dataset directory; empty means $CLEAR_DATA_DIR or ./data"),
        "n_patients": Key(_pos(int), 200, "synthetic cohort size"),
        "slices_per_scan": Key(_pos(int), 32, "axial slices per synthetic scan"),
        "image_size": Key(_pos(int), 64, "square slice size in pixels"),
        "class_prob": Key(_nonneg(float), 0.4, "per-class lesion probability"),
        "max_classes_per_scan": Key(_pos(int), 2, "cap on lesion classes per scan"),
        "noise_sigma": Key(_nonneg(float), 8.0, "background noise in HU"),
        "multilabel": Key(_bool, True, "several lesion classes per scan"),
        "seed": Key(int, 0, "synthetic cohort seed"),
    },
    "pretrain": {
        "encoder": Key(_choice("gated-conv", "patch-attn"), "gated-conv", "backbone family"),
        "embed_dim": Key(_pos(int), 64, "embedding width d"),
        "depth": Key(_pos(int), 2, "backbone blocks"),
        "channels": Key(_pos(int), 16, "gated-conv channels"),
        "patch_size": Key(_pos(int), 8, "patch-attn patch size"),
        "projection_hidden": Key(_pos(int), 128, "projection head hidden width"),
        "method": Key(_choice("lecl", "moco"), "lecl", "contrastive objective"),
        "lambda": Key(_nonneg(float), 0.0, "lesion-similarity weight"),
        "tau": Key(_pos(float), 0.2, "softmax temperature"),
        "momentum": Key(_nonneg(float), 0.99, "key encoder EMA factor"),
        "key_queue_size": Key(_pos(int), 256, "negative key queue capacity"),
        "lesion_queue_size": Key(_pos(int), 64, "lesion embedding queue capacity"),
        "batch_size": Key(_pos(int), 64, "slices per step"),
        "pairing": Key(_choice("lesion", "none"), "lesion", "lesion-centred crop pairing"),
        "view_roles": Key(_choice("key-crop", "query-crop"), "key-crop", "which view gets the lesion crop"),
        "epochs": Key(_pos(int), 20, "pretraining epochs"),
        "lr": Key(_pos(float), 1e-3, "peak learning rate"),
        "warmup_epochs": Key(_nonneg(int), 10, "linear warmup epochs"),
        "weight_decay": Key(_nonneg(float), 0.01, "AdamW weight decay"),
        "slices_per_scan": Key(_pos(int), 16, "slices sampled per scan and epoch"),
        "lesion_neighbors": Key(_nonneg(int), 1, "slices next to a key slice that reuse its box"),
        "windows": Key(_str_list, ("abdominal", "lung"), "windows sampled during pretraining"),
        "seed": Key(int, 0, "initialisation and augmentation seed"),
    },
    "downstream": {
        "task_kind": Key(_choice("multilabel", "multiclass"), "multilabel", "loss and label format"),
        "windows": Key(_str_list, ("abdominal", "lung"), "windows whose embeddings form each bag"),
        "lr": Key(_pos(float), 1e-4, "AdamW learning rate"),
        "batch_size": Key(_pos(int), 8, "bags per step"),
        "max_epochs": Key(_pos(int), 32, "epoch cap"),
        "patience": Key(_pos(int), 8, "early stopping patience"),
        "attention_dim": Key(_pos(int), 128, "attention dimension p"),
        "head_hidden": Key(_pos(int), 256, "classifier hidden width"),
        "weight_decay": Key(_nonneg(float), 0.01, "AdamW weight decay"),
        "standardize": Key(_bool, True, "standardise embedding features on the training bags"),
        "seed": Key(int, 0, "head initialisation seed"),
    },
    "eval": {
        "scheme": Key(_choice("heldout+kfold", "nested-kfold"), "heldout+kfold", "split scheme"),
        "k": Key(_pos(int), 5, "number of folds"),
        "test_frac": Key(_pos(float), 0.2, "held-out test fraction"),
        "threshold": Key(float, 0.5, "F1 decision threshold"),
        "degenerate_as_half": Key(_bool, False, "report single-class AUC as 0.5 instead of undefined"),
        "lambdas": Key(_float_list, (0.0, 1.0, 3.0, 5.0), "lambda values for the sweep"),
        "seed": Key(int, 0, "split seed"),
    },
}


class RunConfig:
    """Resolved configuration; ``cfg["pretrain"]["lr"]`` or ``cfg.get("pretrain", "lr")``."""

    def __init__(self, values: dict | None = None):
        self._values = {sec: {k: key.default for k, key in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, items in (values or {}).items():
            for k, v in items.items():
                self.set(sec, k, v)

    @staticmethod
    def _key(section: str, key: str) -> Key:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        return SCHEMA[section][key]

    def set(self, section: str, key: str, value) -> None:
        spec = self._key(section, key)
        if isinstance(value, str):
            try:
                value = spec.parse(value)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
        self._values[section][key] = value

    def get(self, section: str, key: str):
        self._key(section, key)
        return self._values[section][key]

    def __getitem__(self, section: str) -> dict:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        return dict(self._values[section])

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text, str(path))

    def dumps(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for k in keys:
                lines.append(f"{k} = {_fmt(self._values[sec][k])}")
            lines.append("")
        return "\n".join(lines)

    def copy(self) -> "RunConfig":
        return RunConfig({s: dict(v) for s, v in self._values.items()})


def schema_doc() -> str:
    """Plain-text table of every key with its default."""
    rows = []
    for sec, keys in SCHEMA.items():
        for k, key in keys.items():
            rows.append(f"[{sec}] {k} = {_fmt(key.default)}  # {key.doc}")
    return "\n".join(rows)
