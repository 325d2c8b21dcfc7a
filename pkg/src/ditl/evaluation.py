"""ACC / AUC / MCC as percentages, stratified folds, and fold aggregation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

METRICS = ("ACC", "AUC", "MCC")


class MetricError(ValueError):
    pass


def _labels(labels):
    y = np.asarray(labels).astype(int).ravel()
    if y.size == 0:
        raise MetricError("metrics need at least one sample")
    return y


def hard_predictions(predictions):
    """Class indices from labels or from an N x L score matrix (ties go to class 0)."""
    p = np.asarray(predictions)
    if p.ndim == 2:
        return p.argmax(axis=1)  # argmax returns the first maximum
    return p.astype(int).ravel()


def accuracy(predictions, labels):
    y = _labels(labels)
    p = hard_predictions(predictions)
    if p.shape != y.shape:
        raise MetricError(f"{p.size} predictions for {y.size} labels")
    return 100.0 * int(np.sum(p == y)) / y.size


def auc(scores, labels):
    """Mann-Whitney estimate P(s+ > s-) + P(s+ == s-)/2, as a percentage."""
    y = _labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, 1]
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC is undefined when only one class is present")
    # average ranks handle ties exactly
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - pos.size * (pos.size + 1) / 2.0
    return 100.0 * u / (pos.size * neg.size)


def confusion(predictions, labels):
    y = _labels(labels)
    p = hard_predictions(predictions)
    if p.shape != y.shape:
        raise MetricError(f"{p.size} predictions for {y.size} labels")
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, tn, fp, fn


def mcc(predictions, labels):
    """Matthews correlation as a percentage; 0 when any marginal is empty."""
    tp, tn, fp, fn = confusion(predictions, labels)
    denom = float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return 100.0 * (tp * tn - fp * fn) / np.sqrt(denom)


def evaluate(probs, labels):
    probs = np.asarray(probs)
    return {"ACC": accuracy(probs, labels), "AUC": auc(probs[:, 1], labels), "MCC": mcc(probs, labels)}


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self):
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "val", "test")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=int) for k in ("train", "val", "test")))


def stratified_folds(labels, k=5, seed=0):
    """k stratified train/validation/test splits in proportions 3:1:1.

    Each class is shuffled by ``seed`` and dealt round-robin into k buckets;
    the deal continues across classes so bucket sizes differ by at most one.
    Fold f tests on bucket f, validates on bucket f+1 and trains on the rest.
    """
    y = _labels(labels)
    if k < 3:
        raise MetricError("need k >= 3 to carve train, validation and test buckets")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(k)]
    pos = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        for i in idx:
            buckets[pos % k].append(int(i))
            pos += 1
    buckets = [np.sort(np.array(b, dtype=int)) for b in buckets]
    folds = []
    for f in range(k):
        v = (f + 1) % k
        train = np.sort(np.concatenate([buckets[b] for b in range(k) if b not in (f, v)]))
        folds.append(FoldSplit(train, buckets[v], buckets[f]))
    return folds


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricSet:
    per_fold: dict = field(default_factory=dict)  # metric -> list of fold values

    def mean(self, metric):
        return float(np.mean(self.per_fold[metric]))

    def se(self, metric):
        vals = np.asarray(self.per_fold[metric], dtype=np.float64)
        if vals.size < 2:
            return 0.0
        return float(vals.std(ddof=1) / np.sqrt(vals.size))

    def summary(self):
        return {m: {"mean": self.mean(m), "se": self.se(m)} for m in self.per_fold}

    def formatted(self, metric):
        return f"{self.mean(metric):.2f}±{self.se(metric):.2f}"


def aggregate(fold_metrics):
    """Collect per-fold metric dicts into a MetricSet (mean and standard error)."""
    fold_metrics = list(fold_metrics)
    if not fold_metrics:
        raise MetricError("nothing to aggregate")
    keys = list(fold_metrics[0])
    return MetricSet({k: [float(f[k]) for f in fold_metrics] for k in keys})


def report_csv(rows):
    """``rows``: mapping row name -> MetricSet. One line per row, mean and SE per metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "se")])
    for name, ms in rows.items():
        w.writerow([name] + [f"{v:.4f}" for m in METRICS for v in (ms.mean(m), ms.se(m))])
    return buf.getvalue()


def report_table(rows):
    """Plain-text table in the ``mean±se`` style."""
    width = max([len("experiment")] + [len(n) for n in rows]) + 2
    lines = ["experiment".ljust(width) + "".join(f"{m + ' (%)':>16}" for m in METRICS)]
    for name, ms in rows.items():
        lines.append(name.ljust(width) + "".join(f"{ms.formatted(m):>16}" for m in METRICS))
    return "\n".join(lines) + "\n"


def report_json(rows):
    return json.dumps({n: {"summary": ms.summary(), "per_fold": ms.per_fold} for n, ms in rows.items()},
                      indent=2, sort_keys=True)
