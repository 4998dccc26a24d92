"""Patient-level splits, per-fold downstream training, attention export and lambda sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .estimators import ABMILClassifier
from .metrics import METRIC_NAMES, MetricsReport
from .mil import Bag
from .training import EarlyStopState

__all__ = [
    "SplitViolation",
    "Fold",
    "SplitPlan",
    "make_splits",
    "check_manifest_splits",
    "EarlyStopState",
    "DownstreamResult",
    "train_downstream",
    "AttentionRecord",
    "export_attention",
    "attention_csv",
    "attention_svg",
    "SWEEP_HEADER",
    "lambda_sweep",
    "sweep_csv",
]

SCHEMES = ("heldout+kfold", "nested-kfold")


class SplitViolation(ValueError):
    """A patient ends up on both sides of a train/test boundary."""


@dataclass(frozen=True)
class Fold:
    train: frozenset
    val: frozenset
    test: frozenset


@dataclass
class SplitPlan:
    scheme: str
    seed: int
    folds: list  # list of Fold
    test_patient_ids: frozenset  # common test set, or every outer test fold for nested plans

    def validate(self) -> "SplitPlan":
        for i, f in enumerate(self.folds):
            for a, b, name in ((f.train, f.val, "train/val"), (f.train, f.test, "train/test"), (f.val, f.test, "val/test")):
                overlap = a & b
                if overlap:
                    raise SplitViolation(f"fold {i}: patients {sorted(overlap)[:5]} in both {name}")
        if self.scheme == "heldout+kfold":
            vals = [f.val for f in self.folds]
            if any(f.test != self.test_patient_ids for f in self.folds):
                raise SplitViolation("held-out plans need one common test set")
            union = frozenset().union(*vals)
            if sum(len(v) for v in vals) != len(union):
                raise SplitViolation("validation folds overlap")
        return self

    def fold_of(self, patient_id: str) -> str:
        if self.scheme == "heldout+kfold" and patient_id in self.test_patient_ids:
            return "test"
        for i, f in enumerate(self.folds):
            if patient_id in (f.val if self.scheme == "heldout+kfold" else f.test):
                return f"fold-{i}"
        raise KeyError(patient_id)


def _chunks(ids: list, k: int) -> list[list]:
    # sizes differ by at most one
    return [ids[i::k] for i in range(k)]


def make_splits(patient_ids: Iterable[str], scheme: str = "heldout+kfold", k: int = 5, test_frac: float = 0.2,
                seed: int = 0, test_ids: Iterable[str] | None = None) -> SplitPlan:
    """Deterministic patient-level split plan.

    ``heldout+kfold`` removes ``round(test_frac * n)`` patients (or exactly
    ``test_ids`` when given) as a common test set and cuts the rest into
    ``k`` validation folds.  ``nested-kfold`` cuts all patients into ``k``
    chunks; fold ``i`` tests on chunk ``i`` and validates on chunk ``i+1``.
    """
    ids = sorted(set(patient_ids))
    if scheme not in SCHEMES:
        raise ValueError(f"unknown split scheme {scheme!r}; expected one of {SCHEMES}")
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(ids) < k + 1:
        raise ValueError(f"need at least {k + 1} patients for {k} folds, got {len(ids)}")
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    ids = [ids[i] for i in rng.permutation(len(ids))]
    folds = []
    if scheme == "heldout+kfold":
        if test_ids is not None:
            fixed = set(test_ids)
            unknown = fixed - set(ids)
            if unknown:
                raise ValueError(f"test patients not in the cohort: {sorted(unknown)[:5]}")
            ids = [p for p in ids if p in fixed] + [p for p in ids if p not in fixed]
            n_test = len(fixed)
        else:
            n_test = int(round(test_frac * len(ids)))
        if len(ids) - n_test < k:
            raise ValueError(f"too few patients left for {k} folds after holding out {n_test}")
        test, rest = frozenset(ids[:n_test]), ids[n_test:]
        chunks = [frozenset(c) for c in _chunks(rest, k)]
        all_rest = frozenset(rest)
        for c in chunks:
            folds.append(Fold(all_rest - c, c, test))
        plan = SplitPlan(scheme, seed, folds, test)
    else:
        chunks = [frozenset(c) for c in _chunks(ids, k)]
        everyone = frozenset(ids)
        for i in range(k):
            test, val = chunks[i], chunks[(i + 1) % k]
            folds.append(Fold(everyone - test - val, val, test))
        plan = SplitPlan(scheme, seed, folds, everyone)
    return plan.validate()


def check_manifest_splits(entries) -> None:
    """Reject manifests whose scans of one patient carry both test and non-test splits."""
    sides: dict[str, set] = {}
    for e in entries:
        sides.setdefault(e.patient_id, set()).add(e.split == "test")
    bad = sorted(p for p, s in sides.items() if len(s) > 1)
    if bad:
        raise SplitViolation(f"patients with scans on both sides of the test boundary: {', '.join(bad[:10])}")


# -- downstream training -------------------------------------------------------


@dataclass
class DownstreamResult:
    report: MetricsReport
    models: list
    fold_scores: list  # per fold: (n_test, C) scores
    fold_labels: list
    fold_bags: list  # per fold: indices into the bag list


def _targets(bags: Sequence[Bag], task_kind: str) -> np.ndarray:
    y = np.stack([np.asarray(b.labels) for b in bags])
    return y.astype(np.int64) if task_kind == "multiclass" else y.astype(np.float64)


def _fingerprint(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def train_downstream(bags: Sequence[Bag], plan: SplitPlan, classes: Sequence[str], task_kind: str = "multilabel",
                     head_params: dict | None = None, seed: int = 0, encoder=None,
                     degenerate_as_half: bool = False) -> DownstreamResult:
    """Fit one MIL head per fold and evaluate it on that fold's test patients.

    ``bags[i].labels`` is a binary vector (multilabel) or a class index
    (multiclass).  When ``encoder`` is given its parameters are checked to be
    untouched by training.
    """
    before = _fingerprint(encoder.parameters()) if encoder is not None else None
    by_patient: dict[str, list[int]] = {}
    for i, b in enumerate(bags):
        by_patient.setdefault(b.patient_id, []).append(i)
    unknown = set(by_patient) - set().union(*(f.train | f.val | f.test for f in plan.folds))
    if unknown:
        raise SplitViolation(f"bags for patients outside the split plan: {sorted(unknown)[:5]}")

    def idx(ids) -> list[int]:
        return sorted(i for p in ids for i in by_patient.get(p, []))

    y = _targets(bags, task_kind)
    params = dict(head_params or {})
    models, scores, labels, fold_idx = [], [], [], []
    for f, fold in enumerate(plan.folds):
        tr, va, te = idx(fold.train), idx(fold.val), idx(fold.test)
        if not tr or not te:
            raise SplitViolation(f"fold {f} has an empty train or test set")
        model = ABMILClassifier(task_kind=task_kind, random_state=seed * 1000 + f,
                                n_classes=len(classes) if task_kind == "multiclass" else None, **params)
        eval_set = ([bags[i] for i in va], y[va]) if va else None
        model.fit([bags[i] for i in tr], y[tr], eval_set=eval_set)
        proba = model.predict_proba([bags[i] for i in te])
        lab = y[te]
        if task_kind == "multiclass":
            lab = np.eye(len(classes), dtype=np.int64)[lab]
        models.append(model)
        scores.append(proba)
        labels.append(lab)
        fold_idx.append(te)
    if encoder is not None and _fingerprint(encoder.parameters()) != before:
        raise RuntimeError("encoder parameters changed during downstream training")
    threshold = params.get("threshold", 0.5)
    report = MetricsReport.from_predictions("multilabel" if task_kind == "multilabel" else "multiclass", classes,
                                            scores, labels, threshold, degenerate_as_half)
    return DownstreamResult(report, models, scores, labels, fold_idx)


# -- attention -----------------------------------------------------------------


@dataclass
class AttentionRecord:
    patient_id: str
    attention: np.ndarray
    window_tags: tuple
    slice_indices: tuple
    key_slice_indices: tuple  # volume slice indices of annotated key slices
    scan_id: str = ""

    def __post_init__(self):
        self.attention = np.asarray(self.attention, dtype=np.float64)
        if abs(self.attention.sum() - 1.0) > 1e-9:
            raise ValueError(f"attention sums to {self.attention.sum()!r}, expected 1")

    @property
    def key_positions(self) -> np.ndarray:
        """Bag positions whose slice lies within one slice of a key slice."""
        s = np.asarray(self.slice_indices)
        keys = np.asarray(self.key_slice_indices)
        if keys.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.nonzero(np.min(np.abs(s[:, None] - keys[None, :]), axis=1) <= 1)[0]

    @property
    def key_mass(self) -> float:
        return float(self.attention[self.key_positions].sum())

    @property
    def uniform_baseline(self) -> float:
        return len(self.key_positions) / len(self.attention)


def export_attention(bag: Bag, model: ABMILClassifier, key_slices: Sequence[int] | None = None) -> AttentionRecord:
    """Softmax attention of ``model`` over ``bag``.

    Key slices default to the slice indices at the bag's ``key_slice_indices``
    positions.
    """
    a = model.attention([bag.embeddings])[0]
    if key_slices is None:
        key_slices = sorted({bag.slice_indices[i] for i in bag.key_slice_indices})
    return AttentionRecord(bag.patient_id, a, tuple(bag.window_tags), tuple(bag.slice_indices),
                           tuple(int(k) for k in key_slices), bag.scan_id)


ATTENTION_HEADER = ["patient_id", "slice_index", "window", "attention", "is_key_slice"]


def attention_csv(records: Iterable[AttentionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTENTION_HEADER)
    for r in records:
        keys = set(r.key_slice_indices)
        for a, s, win in zip(r.attention, r.slice_indices, r.window_tags):
            w.writerow([r.patient_id, s, win, repr(float(a)), int(s in keys)])
    return buf.getvalue()


_COLORS = {"abdominal": "#d62728", "lung": "#1f77b4", "none": "#333333"}


def attention_svg(record: AttentionRecord, width: int = 480, height: int = 200) -> str:
    """Line plot of attention against slice index, one series per window; key slices shaded."""
    pad = 30
    s = np.asarray(record.slice_indices, dtype=np.float64)
    smin, smax = s.min(), max(s.max(), s.min() + 1)
    amax = max(float(record.attention.max()), 1e-12)

    def x(v):
        return pad + (v - smin) / (smax - smin) * (width - 2 * pad)

    def y(v):
        return height - pad - v / amax * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="16" font-size="12">{record.patient_id} attention</text>']
    for k in record.key_slice_indices:
        parts.append(f'<rect x="{x(k) - 2:.1f}" y="{pad}" width="4" height="{height - 2 * pad}" fill="#ddd"/>')
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
    for win in dict.fromkeys(record.window_tags):
        sel = [i for i, t in enumerate(record.window_tags) if t == win]
        sel.sort(key=lambda i: s[i])
        pts = " ".join(f"{x(s[i]):.1f},{y(record.attention[i]):.1f}" for i in sel)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{_COLORS.get(win, "#2ca02c")}">'
                     f"<title>{win}</title></polyline>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- lambda sweep --------------------------------------------------------------

SWEEP_HEADER = ["lambda", "seed", "task", *(f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std"))]


def lambda_sweep(lams: Sequence[float], seed: int, tasks: Sequence[str],
                 run_fn: Callable[[float, int], dict]) -> list[dict]:
    """Run ``run_fn(lam, seed)`` (returning ``{task: MetricsReport}``) per lambda.

    Returns one row per (lambda, task) with macro mean and std of each metric.
    """
    rows = []
    for lam in lams:
        reports = run_fn(float(lam), seed)
        for task in tasks:
            rep = reports[task]
            row = {"lambda": float(lam), "seed": seed, "task": task}
            for m in METRIC_NAMES:
                row[f"{m}_mean"], row[f"{m}_std"] = rep.mean_std(m)
            rows.append(row)
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) and not math.isnan(r[c]) else r[c] for c in SWEEP_HEADER])
    return buf.getvalue()
