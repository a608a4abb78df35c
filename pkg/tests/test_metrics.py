import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from slicekit import metrics
from slicekit.errors import EmptyDataset, MissingPredictions, ShapeError, UndefinedMetric
from slicekit.predictions import PredictionRecord, PredictionSet
from slicekit.slicer import View


def test_confusion_examples():
    assert metrics.confusion_metrics([0.9, 0.8], [1, 1]) == (1.0, 1.0, 1.0)
    assert metrics.confusion_metrics([0.1, 0.2], [1, 0]) == (0.0, 0.0, 0.0)
    assert metrics.confusion_metrics([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0]) == (0.5, 0.5, 0.5)
    assert metrics.confusion_metrics([0.5], [1], threshold=0.5) == (1.0, 1.0, 1.0)


def test_confusion_errors():
    with pytest.raises(ShapeError):
        metrics.confusion_metrics([0.5, 0.5], [1])
    with pytest.raises(ShapeError):
        metrics.confusion_metrics([], [])
    with pytest.raises(ShapeError):
        metrics.confusion_metrics([0.5], [2])


def test_roc_examples():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.roc_auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5
    assert metrics.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(UndefinedMetric):
        metrics.roc_auc([0.1, 0.2], [1, 1])


def test_pr_examples():
    assert metrics.pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.pr_auc([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(1 / 4, abs=1e-15)
    assert metrics.pr_auc([0.4] * 8, [1, 0, 0, 1, 0, 0, 0, 1]) == pytest.approx(3 / 8, abs=1e-15)
    with pytest.raises(UndefinedMetric):
        metrics.pr_auc([0.1, 0.2], [0, 0])


def _dataset(rng, n, ties):
    scores = rng.integers(0, 4, size=n) / 4 if ties else rng.random(n)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[-1] = 0, 1
    return scores, labels


@pytest.mark.parametrize("ties", [False, True])
def test_auc_match_enumeration_oracles(ties):
    rng = np.random.default_rng(99 + ties)
    for _ in range(40):
        s, y = _dataset(rng, int(rng.integers(2, 120)), ties)
        assert abs(metrics.roc_auc(s, y) - oracles.roc_auc_pairs(s.tolist(), y.tolist())) < 1e-12
        assert abs(metrics.pr_auc(s, y) - oracles.average_precision_enum(s.tolist(), y.tolist())) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_roc_monotone_transform_invariance(seed):
    s, y = _dataset(np.random.default_rng(seed), 40, ties=True)
    assert metrics.roc_auc(s, y) == metrics.roc_auc(np.exp(3 * s) - 7, y)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_pr_constant_scores_equal_prevalence(seed, c):
    _, y = _dataset(np.random.default_rng(seed), 30, ties=False)
    assert metrics.pr_auc(np.full(30, c), y) == pytest.approx(y.mean(), abs=1e-15)


def test_pr_above_prevalence_for_good_ranking():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, size=200)
    s = np.clip(0.5 * y + rng.normal(0.25, 0.2, size=200), 0, 1)
    assert metrics.pr_auc(s, y) >= y.mean()


def test_recall_nonincreasing_in_threshold():
    rng = np.random.default_rng(2)
    s, y = _dataset(rng, 100, ties=True)
    rows = metrics.threshold_sweep(s, y, np.linspace(0, 1, 21))
    recalls = [r for _, _, r, _ in rows]
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))
    for t, p, r, f in rows:
        assert (p, r, f) == oracles.confusion(s.tolist(), y.tolist(), t)


# ---------------------------------------------------------------------------
# per-organ evaluation

def _records(scores_by_organ):
    recs = []
    for organ, pairs in scores_by_organ.items():
        for i, (s, y) in enumerate(pairs):
            recs.append(PredictionRecord("v", View.AXIAL, i, organ, s, y))
    return PredictionSet(recs)


def test_evaluate_rows():
    preds = _records({1: [(0.9, 1), (0.2, 0), (0.6, 0)], 6: [(0.7, 1), (0.4, 1)]})
    rep = metrics.evaluate(preds)
    assert [r.organ for r in rep.rows] == ["spleen", "liver", "overall"]
    spleen = rep["spleen"]
    assert (spleen.precision, spleen.recall) == (0.5, 1.0)
    assert spleen.support == 1 and spleen.count == 3
    assert rep["liver"].roc_auc is None  # single class
    overall = rep["overall"]
    assert overall.count == 5
    assert overall.roc_auc == oracles.roc_auc_pairs([0.9, 0.2, 0.6, 0.7, 0.4], [1, 0, 0, 1, 1])
    for row in rep.rows:
        for v in (row.precision, row.recall, row.f1, row.roc_auc, row.pr_auc):
            assert v is None or 0 <= v <= 1


def test_evaluate_organ_threshold_override():
    preds = _records({1: [(0.9, 1), (0.6, 0)], 6: [(0.7, 1), (0.4, 1)]})
    rep = metrics.evaluate(preds, organ_thresholds={"Spleen": 0.8, "liver": 0.3})
    assert rep["spleen"].precision == 1.0 and rep["spleen"].threshold == 0.8
    assert rep["liver"].recall == 1.0
    assert rep["overall"].f1 == 1.0


def test_evaluate_with_label_file():
    preds = _records({1: [(0.9, None), (0.3, None)]})
    labels = _records({1: [(1.0, 1), (0.0, 0)]})
    assert metrics.evaluate(preds, labels)["spleen"].f1 == 1.0
    with pytest.raises(MissingPredictions):
        metrics.evaluate(preds)
    with pytest.raises(MissingPredictions):
        metrics.evaluate(_records({1: [(0.9, None)] * 3}), labels)
    with pytest.raises(EmptyDataset):
        metrics.evaluate(PredictionSet())
