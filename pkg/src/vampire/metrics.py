"""Eye-level aggregation, threshold metrics and ranking metrics.

Scores at or above the threshold count as positive. AUC uses the
Mann-Whitney pair formulation with half credit for ties; AUPR is average
precision with tied scores grouped into one operating point.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, MetricUndefined

LABELS = ("HR", "HG", "HC", "HTG", "HTN")
METRIC_NAMES = ("precision", "recall", "f1", "accuracy", "auc", "aupr")


@dataclass
class EvalRecord:
    eye_id: str
    patient_id: str
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise DataError(f"{self.eye_id}: {self.scores.shape} scores vs {self.labels.shape} labels")


def aggregate_by_eye(records: Sequence[EvalRecord]) -> list[EvalRecord]:
    """Average scores per eye; eyes keep first-seen order."""
    groups: OrderedDict[str, list[EvalRecord]] = OrderedDict()
    for r in records:
        groups.setdefault(r.eye_id, []).append(r)
    out = []
    for eye, recs in groups.items():
        first = recs[0]
        for r in recs[1:]:
            if not np.array_equal(r.labels, first.labels):
                raise DataError(f"eye {eye}: conflicting labels {first.labels} vs {r.labels}")
            if r.patient_id != first.patient_id:
                raise DataError(f"eye {eye}: belongs to patients {first.patient_id} and {r.patient_id}")
        scores = np.mean([r.scores for r in recs], axis=0)
        out.append(EvalRecord(eye, first.patient_id, scores, first.labels.copy()))
    return out


def _counts(scores: np.ndarray, labels: np.ndarray, threshold: float) -> tuple[int, int, int, int]:
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    return tp, fp, fn, tn


def threshold_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    tp, fp, fn, tn = _counts(np.asarray(scores, float), np.asarray(labels), threshold)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "accuracy": (tp + tn) / (tp + fp + fn + tn)}


def roc_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # average ranks within tie groups
    starts = np.r_[0, np.nonzero(np.diff(sorted_s))[0] + 1]
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (recall gain) x precision."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise MetricUndefined("AUPR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y == 1)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return math.fsum(gains * precision)


def confusion_metrics(records: Sequence[EvalRecord], threshold: float = 0.5) -> dict[str, dict[str, float]]:
    """Per-label and macro precision/recall/F1/accuracy."""
    if not records:
        raise DataError("no records to evaluate")
    S = np.stack([r.scores for r in records])
    Y = np.stack([r.labels for r in records])
    per = {LABELS[j] if S.shape[1] == len(LABELS) else str(j): threshold_metrics(S[:, j], Y[:, j], threshold)
           for j in range(S.shape[1])}
    per["macro"] = {k: float(np.mean([m[k] for m in per.values()])) for k in ("precision", "recall", "f1", "accuracy")}
    return per


def metrics_report(records: Sequence[EvalRecord], threshold: float = 0.5) -> dict[str, dict[str, float]]:
    """Full per-label table plus a macro row.

    Undefined ranking metrics come back as NaN and are left out of the macro
    mean; ``report["macro"]["excluded"]`` counts them.
    """
    table = confusion_metrics(records, threshold)
    S = np.stack([r.scores for r in records])
    Y = np.stack([r.labels for r in records])
    names = [k for k in table if k != "macro"]
    excluded = 0
    for j, name in enumerate(names):
        for metric, fn in (("auc", roc_auc), ("aupr", aupr)):
            try:
                table[name][metric] = fn(S[:, j], Y[:, j])
            except MetricUndefined:
                table[name][metric] = float("nan")
                excluded += 1
    for metric in ("auc", "aupr"):
        vals = [table[n][metric] for n in names if not np.isnan(table[n][metric])]
        table["macro"][metric] = float(np.mean(vals)) if vals else float("nan")
    if excluded:
        warnings.warn(f"{excluded} undefined per-label ranking metric(s) excluded from the macro mean", stacklevel=2)
    table["macro"]["excluded"] = excluded
    return table


def write_report(table: dict[str, dict[str, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *METRIC_NAMES])
        for name, row in table.items():
            w.writerow([name, *(f"{row[m]:.6f}" for m in METRIC_NAMES)])
    return path


def read_report(path: str | Path) -> dict[str, dict[str, float]]:
    with Path(path).open(newline="") as fh:
        return {row["label"]: {m: float(row[m]) for m in METRIC_NAMES} for row in csv.DictReader(fh)}


def summarize_folds(tables: Sequence[dict[str, dict[str, float]]]) -> dict[str, dict[str, float]]:
    """Mean and standard deviation over folds, row by row; keys ``<metric>`` and ``<metric>_std``."""
    out: dict[str, dict[str, float]] = {}
    for name in tables[0]:
        row = {}
        for m in METRIC_NAMES:
            vals = np.array([t[name][m] for t in tables], dtype=float)
            vals = vals[~np.isnan(vals)]
            row[m] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{m}_std"] = float(vals.std()) if len(vals) else float("nan")
        out[name] = row
    return out


def write_summary(summary: dict[str, dict[str, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(c for m in METRIC_NAMES for c in (m, f"{m}_std"))])
        for name, row in summary.items():
            w.writerow([name, *(f"{row[c]:.6f}" for m in METRIC_NAMES for c in (m, f"{m}_std"))])
    return path


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------

def brute_force_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    s = [float(v) for v in scores]
    y = [int(v) for v in labels]
    pos = [a for a, t in zip(s, y) if t == 1]
    neg = [a for a, t in zip(s, y) if t != 1]
    if not pos or not neg:
        raise MetricUndefined("AUC needs at least one positive and one negative")
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_force_aupr(scores, labels) -> float:
    """Walk every distinct threshold from high to low, adding recall gain times precision."""
    s = [float(v) for v in scores]
    y = [int(v) for v in labels]
    n_pos = sum(y)
    if n_pos == 0:
        raise MetricUndefined("AUPR needs at least one positive")
    terms, prev_recall = [], 0.0
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for a, b in zip(s, y) if a >= t and b == 1)
        fp = sum(1 for a, b in zip(s, y) if a >= t and b != 1)
        recall = tp / n_pos
        terms.append((recall - prev_recall) * (tp / (tp + fp)))
        prev_recall = recall
    return math.fsum(terms)


def oracle_trials(trials: int = 1000, max_len: int = 8, seed: int = 0) -> dict[str, float]:
    """Compare the fast ranking metrics with the brute-force references on random small sets.

    Scores are drawn from a few levels so ties are common. Returns the worst
    absolute disagreement per metric and the number of defined cases.
    """
    rng = np.random.default_rng(seed)
    worst = {"auc": 0.0, "aupr": 0.0}
    defined = {"auc": 0, "aupr": 0}
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        scores = rng.integers(0, 4, n) / 4.0
        labels = rng.integers(0, 2, n)
        for name, fast, slow in (("auc", roc_auc, brute_force_auc), ("aupr", aupr, brute_force_aupr)):
            try:
                expected = slow(scores, labels)
            except MetricUndefined:
                try:
                    fast(scores, labels)
                except MetricUndefined:
                    continue
                worst[name] = math.inf
                continue
            worst[name] = max(worst[name], abs(fast(scores, labels) - expected))
            defined[name] += 1
    return {"auc_max_error": worst["auc"], "aupr_max_error": worst["aupr"],
            "auc_cases": defined["auc"], "aupr_cases": defined["aupr"]}
