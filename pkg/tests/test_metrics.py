import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from modelbridge.metrics import balanced_accuracy, confusion_matrix, evaluate, f1_scores


def naive_scores(y_true, y_pred):
    """Independent per-class counting with explicit loops."""
    classes = sorted(set(y_true) | set(y_pred))
    recalls, f1s, supports = [], [], []
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = tp + fn
        if support:
            recalls.append(tp / support)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / support if support else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        supports.append(support)
    bacc = sum(recalls) / len(recalls)
    macro = sum(f1s) / len(f1s)
    weighted = sum(f * s for f, s in zip(f1s, supports)) / sum(supports)
    return bacc, macro, weighted


def test_hand_computed_case():
    y, p = [0, 0, 1, 1], [0, 1, 1, 1]
    assert balanced_accuracy(y, p) == 0.75
    macro, weighted, per_class = f1_scores(y, p)
    assert_allclose(per_class, [2 / 3, 4 / 5])
    assert abs(macro - 0.7333) < 1e-4 and abs(weighted - 0.7333) < 1e-4


def test_perfect_predictions():
    y = [0, 1, 2, 2, 1]
    assert balanced_accuracy(y, y) == 1.0
    macro, weighted, _ = f1_scores(y, y)
    assert macro == weighted == 1.0


def test_missing_predicted_class_counts_as_zero_f1():
    macro, _, per_class = f1_scores([0, 1, 2], [0, 1, 1])
    assert per_class[2] == 0.0
    assert_allclose(macro, (1 + 2 / 3 + 0) / 3)


def test_oracle_equivalence_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(2, 6))
        y = rng.integers(0, k, n).tolist()
        p = rng.integers(0, k, n).tolist()
        bacc, macro, weighted = naive_scores(y, p)
        f1m, f1w, _ = f1_scores(y, p)
        assert balanced_accuracy(y, p) == bacc
        assert f1m == macro
        assert f1w == weighted


def test_uniform_random_predictor_is_one_third():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 3, 60000)
    p = rng.integers(0, 3, 60000)
    assert abs(balanced_accuracy(y, p) - 1 / 3) < 0.01


def test_zero_support_class_excluded_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert balanced_accuracy([0, 0, 2], [0, 1, 2]) == pytest.approx(0.75)
    assert "zero support" in caplog.text


def test_length_mismatch():
    with pytest.raises(ValueError):
        f1_scores([0, 1], [0])
    with pytest.raises(ValueError):
        balanced_accuracy([0, 1], [0, 1, 1])


def test_metric_set_invariants():
    rng = np.random.default_rng(2)
    y, p = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    ms = evaluate(y, p, 3)
    cm = np.array(ms.confusion)
    assert (cm.sum(axis=1) == np.bincount(y, minlength=3)).all()
    assert (cm == confusion_matrix(y, p, 3)).all()
    for v in [ms.balanced_accuracy, ms.f1_macro, ms.f1_weighted, *ms.precision, *ms.recall]:
        assert 0.0 <= v <= 1.0
    assert set(ms.to_dict()) == {"balanced_accuracy", "f1_macro", "f1_weighted", "precision", "recall", "confusion"}
