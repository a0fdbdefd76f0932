"""Classification metrics: balanced accuracy, Cohen's kappa, weighted F1,
AUROC and AUC-PR.

Rank metrics integrate trapezoidally with thresholds at the unique scores
(ties grouped); AUROC is therefore the mid-rank Mann-Whitney statistic.
Multi-class AUROC/AUC-PR are macro one-vs-rest averages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    """Raised when a metric is undefined for the given labels."""


CSV_COLUMNS = ["balanced_accuracy", "cohens_kappa", "weighted_f1", "auroc", "auc_pr"]


@dataclass
class EvalResult:
    balanced_accuracy: float
    cohens_kappa: float
    weighted_f1: float
    auroc: float
    auc_pr: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        d = {col: float(getattr(self, col)) for col in CSV_COLUMNS}
        d["confusion"] = np.asarray(self.confusion).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(CSV_COLUMNS)

    def csv_row(self) -> str:
        return ",".join(f"{float(getattr(self, col)):.10g}" for col in CSV_COLUMNS)

    def summary(self) -> dict:
        """Headline triple: kappa for multi-class tasks, AUC-PR for binary."""
        binary = np.asarray(self.confusion).shape[0] == 2
        return {
            "balanced_accuracy": self.balanced_accuracy,
            ("auc_pr" if binary else "cohens_kappa"): (
                self.auc_pr if binary else self.cohens_kappa
            ),
            ("auroc" if binary else "weighted_f1"): (
                self.auroc if binary else self.weighted_f1
            ),
        }


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels, pred):
        conf[t, p] += 1
    return conf


def balanced_accuracy(conf: np.ndarray) -> float:
    support = conf.sum(axis=1)
    present = support > 0
    recalls = conf.diagonal()[present] / support[present]
    return float(recalls.mean())


def cohens_kappa(conf: np.ndarray) -> float:
    n = conf.sum()
    po = conf.trace() / n
    pe = float((conf.sum(axis=1) * conf.sum(axis=0)).sum()) / (n * n)
    if pe >= 1.0:
        return 0.0
    return float((po - pe) / (1.0 - pe))


def weighted_f1(conf: np.ndarray) -> float:
    n = conf.sum()
    score = 0.0
    for c in range(conf.shape[0]):
        support = conf[c].sum()
        if support == 0:
            continue
        tp = conf[c, c]
        precision = tp / conf[:, c].sum() if conf[:, c].sum() else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        score += (support / n) * f1
    return float(score)


def binary_auroc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mid-rank AUROC: equals trapezoidal ROC integration with tied scores
    grouped."""
    pos = positives.astype(bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # mid-rank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_auc_pr(scores: np.ndarray, positives: np.ndarray) -> float:
    """Trapezoidal area under the precision-recall curve.

    Thresholds sit at the unique scores in descending order; the curve is
    anchored at recall 0 with the precision of the highest threshold.
    """
    pos = positives.astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == len(pos):
        raise MetricsError("AUC-PR needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    sorted_pos = pos[order].astype(np.float64)
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(1.0 - sorted_pos)
    # keep only the last index of each tied score group
    last_of_group = np.ones(len(scores), dtype=bool)
    last_of_group[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    tp, fp = tp[last_of_group], fp[last_of_group]
    recall = tp / n_pos
    precision = tp / (tp + fp)
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    return float(np.trapezoid(precision, recall))


def _macro_ovr(scores: np.ndarray, labels: np.ndarray, metric) -> float:
    present = np.unique(labels)
    vals = [metric(scores[:, c], labels == c) for c in present]
    return float(np.mean(vals))


def evaluate(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    """All five metrics from per-class scores and integer labels.

    Predictions are the argmax of each row.  Rank metrics require at least
    two classes present in the labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError("scores must be (samples, classes) aligned with labels")
    n_classes = scores.shape[1]
    if len(np.unique(labels)) < 2:
        raise MetricsError("rank metrics and kappa need at least two classes present")
    pred = scores.argmax(axis=1)
    conf = confusion_matrix(pred, labels, n_classes)
    if n_classes == 2:
        auroc = binary_auroc(scores[:, 1], labels == 1)
        auc_pr = binary_auc_pr(scores[:, 1], labels == 1)
    else:
        auroc = _macro_ovr(scores, labels, binary_auroc)
        auc_pr = _macro_ovr(scores, labels, binary_auc_pr)
    return EvalResult(
        balanced_accuracy=balanced_accuracy(conf),
        cohens_kappa=cohens_kappa(conf),
        weighted_f1=weighted_f1(conf),
        auroc=auroc,
        auc_pr=auc_pr,
        confusion=conf,
    )
