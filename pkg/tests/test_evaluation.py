import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ditl import evaluation as ev


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return 100.0 * wins / (len(pos) * len(neg))


def brute_mcc(pred, labels):
    tp = sum(p == 1 and y == 1 for p, y in zip(pred, labels))
    tn = sum(p == 0 and y == 0 for p, y in zip(pred, labels))
    fp = sum(p == 1 and y == 0 for p, y in zip(pred, labels))
    fn = sum(p == 0 and y == 1 for p, y in zip(pred, labels))
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if den == 0 else 100.0 * (tp * tn - fp * fn) / den


@pytest.mark.parametrize("n", range(1, 7))
def test_acc_and_mcc_exhaustive(n):
    for labels in itertools.product((0, 1), repeat=n):
        for pred in itertools.product((0, 1), repeat=n):
            assert ev.accuracy(np.array(pred), labels) == 100.0 * sum(
                p == y for p, y in zip(pred, labels)) / n
            assert ev.mcc(np.array(pred), labels) == pytest.approx(brute_mcc(pred, labels), abs=1e-12)


@pytest.mark.parametrize("n", [7, 8])
def test_mcc_exhaustive_large(n):
    labels = (np.arange(n) % 3 == 0).astype(int)
    for pred in itertools.product((0, 1), repeat=n):
        assert ev.mcc(np.array(pred), labels) == pytest.approx(brute_mcc(pred, labels), abs=1e-12)


@pytest.mark.parametrize("n", range(2, 9))
def test_auc_exhaustive_with_ties(n):
    # scores over a 3-level grid so ties are frequent
    for labels in itertools.product((0, 1), repeat=n):
        if len(set(labels)) < 2:
            continue
        for scores in itertools.islice(itertools.product((0.1, 0.5, 0.9), repeat=n), 0, None, 7):
            assert ev.auc(np.array(scores), labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_auc_single_class_raises():
    with pytest.raises(ev.MetricError):
        ev.auc([0.1, 0.2], [1, 1])


def test_argmax_ties_go_to_class_zero():
    assert list(ev.hard_predictions(np.array([[0.5, 0.5], [0.4, 0.6]]))) == [0, 1]


def test_evaluate_keys_and_shapes():
    p = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4], [0.1, 0.9]])
    out = ev.evaluate(p, [0, 1, 1, 1])
    assert set(out) == set(ev.METRICS)
    assert out["ACC"] == 75.0 and out["AUC"] == 100.0
    with pytest.raises(ev.MetricError):
        ev.accuracy([0, 1], [0, 1, 1])
    with pytest.raises(ev.MetricError):
        ev.mcc([], [])


def test_perfect_and_inverted_mcc():
    y = [0, 1, 1, 0]
    assert ev.mcc(y, y) == 100.0
    assert ev.mcc([1 - v for v in y], y) == -100.0


# --- folds ---------------------------------------------------------------------

@pytest.mark.parametrize("n,rate,k", [(200, 0.36, 5), (53, 0.3, 5), (30, 0.5, 3)])
def test_folds_partition_and_stratify(n, rate, k):
    labels = (np.arange(n) < round(rate * n)).astype(int)
    folds = ev.stratified_folds(labels, k, seed=4)
    assert len(folds) == k
    tests = np.concatenate([f.test for f in folds])
    assert sorted(tests) == list(range(n))
    for f in folds:
        parts = [set(f.train), set(f.val), set(f.test)]
        assert sum(map(len, parts)) == n and not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        for part in (f.val, f.test):
            expected = labels.sum() * len(part) / n
            assert abs(labels[part].sum() - expected) <= 1


def test_folds_rotate_validation():
    folds = ev.stratified_folds(np.arange(50) % 2, 5, seed=0)
    for f in range(5):
        assert np.array_equal(folds[f].val, folds[(f + 1) % 5].test)


def test_folds_deterministic_and_roundtrip():
    y = np.arange(40) % 3 == 0
    a = ev.stratified_folds(y, 5, 9)
    b = ev.stratified_folds(y, 5, 9)
    c = ev.stratified_folds(y, 5, 10)
    assert all(np.array_equal(x.test, z.test) for x, z in zip(a, b))
    assert any(not np.array_equal(x.test, z.test) for x, z in zip(a, c))
    back = ev.FoldSplit.from_dict(json.loads(json.dumps(a[2].to_dict())))
    assert np.array_equal(back.train, a[2].train)


def test_folds_need_three_buckets():
    with pytest.raises(ev.MetricError):
        ev.stratified_folds([0, 1, 0, 1], k=2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=10, max_size=80), st.integers(0, 1000))
def test_fold_bucket_sizes_differ_by_one(labels, seed):
    folds = ev.stratified_folds(labels, 5, seed)
    sizes = [len(f.test) for f in folds]
    assert max(sizes) - min(sizes) <= 1


# --- aggregation -------------------------------------------------------------------

def test_aggregate_mean_and_standard_error():
    ms = ev.aggregate([{"ACC": 70.0, "AUC": 80.0, "MCC": 10.0},
                       {"ACC": 74.0, "AUC": 82.0, "MCC": 30.0}])
    assert ms.mean("ACC") == 72.0
    assert ms.se("MCC") == pytest.approx(np.std([10, 30], ddof=1) / math.sqrt(2))
    assert ms.formatted("ACC") == "72.00±2.00"
    assert ev.aggregate([{"ACC": 1.0}]).se("ACC") == 0.0
    with pytest.raises(ev.MetricError):
        ev.aggregate([])


def test_reports_render_every_row():
    rows = {"a": ev.aggregate([{"ACC": 1.0, "AUC": 2.0, "MCC": 3.0}]),
            "bb": ev.aggregate([{"ACC": 4.0, "AUC": 5.0, "MCC": 6.0}])}
    csv_text = ev.report_csv(rows).splitlines()
    assert csv_text[0].startswith("experiment,ACC_mean,ACC_se") and len(csv_text) == 3
    table = ev.report_table(rows)
    assert "4.00±0.00" in table and "MCC (%)" in table
    assert json.loads(ev.report_json(rows))["bb"]["summary"]["AUC"]["mean"] == 5.0
