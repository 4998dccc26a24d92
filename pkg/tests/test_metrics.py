import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clearct.metrics import MetricsReport, UndefinedMetricError, auc, auprc, f1


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def threshold_sweep_ap(scores, labels):
    # walk every distinct threshold from the top; add recall gained times precision there
    total, prev_recall = 0.0, 0.0
    n_pos = sum(labels)
    for t in sorted(set(scores), reverse=True):
        pred = [s >= t for s in scores]
        tp = sum(1 for p, y in zip(pred, labels) if p and y)
        precision, recall = tp / sum(pred), tp / n_pos
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def test_auc_cases():
    assert auc([0.2, 0.8], [0, 1]) == 1.0
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_equals_pairwise_count_exactly(rng):
    # coarse scores so ties are common
    scores = np.round(rng.random(1000), 2)
    labels = (rng.random(1000) < 0.3).astype(int)
    assert auc(scores, labels) == pairwise_auc(scores.tolist(), labels.tolist())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_property(pairs):
    scores, labels = [float(s) for s, _ in pairs], [y for _, y in pairs]
    if 0 < sum(labels) < len(labels):
        assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_auprc_cases():
    assert auprc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    labels = [1, 0, 0, 1, 0, 0, 0, 0]
    assert auprc([0.4] * 8, labels) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [0, 0])


def test_auprc_matches_threshold_enumeration(rng):
    for _ in range(50):
        n = int(rng.integers(5, 60))
        scores = np.round(rng.random(n), 1).tolist()
        labels = (rng.random(n) < 0.4).astype(int).tolist()
        if sum(labels) == 0:
            labels[0] = 1
        assert abs(auprc(scores, labels) - threshold_sweep_ap(scores, labels)) <= 1e-10


def test_f1_cases():
    assert f1([0.9, 0.1, 0.8], [1, 0, 1]) == 1.0
    assert f1([0.9, 0.9, 0.9, 0.9], [1, 0, 1, 0]) == pytest.approx(2 / 3, abs=1e-15)
    assert f1([0.1, 0.2], [1, 0]) == 0.0
    assert f1([0.5], [1]) == 1.0  # threshold is inclusive


def test_metrics_stay_in_unit_interval(rng):
    for _ in range(20):
        s = rng.random(30)
        y = np.r_[0, 1, (rng.random(28) < 0.5).astype(int)]
        for v in (auc(s, y), auprc(s, y), f1(s, y)):
            assert 0.0 <= v <= 1.0


def _report(rng, n_folds=5, degenerate=False):
    scores = [rng.random((20, 2)) for _ in range(n_folds)]
    labels = [np.c_[(rng.random(20) < 0.5).astype(int), np.zeros(20, dtype=int)] for _ in range(n_folds)]
    labels[0][0, 1] = 1  # class b is defined only in fold 0
    return MetricsReport.from_predictions("t", ["a", "b"], scores, labels, degenerate_as_half=degenerate), scores, labels


def test_report_mean_std_recomputable(rng):
    rep, scores, labels = _report(rng)
    per_fold = np.array([auc(s[:, 0], y[:, 0]) for s, y in zip(scores, labels)])
    mean, std = rep.mean_std("auc", "a")
    assert abs(mean - per_fold.mean()) <= 1e-12
    assert abs(std - per_fold.std(ddof=0)) <= 1e-12
    assert rep.n_folds == 5 and len(rep.fold_values("auc", "a")) == 5


def test_report_flags_undefined_and_excludes_them(rng):
    rep, scores, labels = _report(rng)
    assert {(f, "b", "auc") for f in range(1, 5)} <= set(rep.undefined)
    assert {(f, "b", "auprc") for f in range(1, 5)} <= set(rep.undefined)
    assert (0, "b", "auc") not in rep.undefined
    # macro per fold falls back to the defined classes only
    np.testing.assert_allclose(rep.fold_values("auc")[1:], rep.fold_values("auc", "a")[1:], rtol=0, atol=0)
    assert rep.mean_std("auc", "b")[1] == 0.0  # single defined fold


def test_degenerate_as_half(rng):
    rep, _, _ = _report(rng, degenerate=True)
    assert all(rep.fold_values("auc", "b")[1:] == 0.5)
    assert not any(m == "auc" for _, _, m in rep.undefined)


def test_report_csv_round_trip(rng):
    rep, _, _ = _report(rng)
    text = rep.to_csv()
    assert text.splitlines()[0] == "task,class,fold,auc,auprc,f1"
    back = MetricsReport.from_csv(text)
    assert back.to_csv() == text
    assert sorted(back.undefined) == sorted(rep.undefined)
    summary = rep.summary_csv().splitlines()
    assert summary[0] == "task,class,metric,mean,std,n_folds"
    assert len(summary) == 1 + 3 * 3
    for line in summary[1:]:
        task, cls, metric, mean, std, n = line.split(",")
        if cls != "macro":
            assert float(mean) == rep.mean_std(metric, cls)[0] or math.isnan(float(mean))
        assert n == "5"
