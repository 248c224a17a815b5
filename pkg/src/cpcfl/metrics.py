"""Accuracy, F1, AUROC, clustering agreement and multi-trial statistics."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricWarning(RuntimeWarning):
    pass


@dataclass
class EvaluationReport:
    round_index: int | None
    client_accuracy: list[float]
    accuracy: float
    f1_macro: float
    f1_weighted: float
    auroc_ovr_macro: float
    auroc_ovr_weighted: float
    auroc_ovo_macro: float
    auroc_ovo_weighted: float
    selections: list[int] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    SCORE_FIELDS = (
        "accuracy", "f1_macro", "f1_weighted",
        "auroc_ovr_macro", "auroc_ovr_weighted", "auroc_ovo_macro", "auroc_ovo_weighted",
    )


# ---------------------------------------------------------------- F1


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def f1_scores(confusion) -> tuple[float, float]:
    """(macro, weighted) F1 from a confusion matrix with true classes on rows.

    Classes whose precision and recall are both undefined or zero score 0;
    the weighted mean uses true-class support, so absent classes weigh 0.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion must be a square matrix")
    if np.any(cm < 0):
        raise ValueError("confusion counts must be nonnegative")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is all zero")
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean()), float((f1 * support).sum() / support.sum())


# ---------------------------------------------------------------- AUROC


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    ordered = np.sort(values)
    first = np.searchsorted(ordered, values, side="left")
    last = np.searchsorted(ordered, values, side="right")
    return (first + last + 1) / 2.0


def binary_auroc(scores, positive) -> float:
    """Mann-Whitney AUROC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary AUROC needs both positives and negatives")
    ranks = average_ranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc(scores, labels, scheme: str = "ovr", average: str = "macro") -> float:
    """Multiclass AUROC from probability rows.

    ``ovr``: each class against the rest, averaged uniformly (macro) or by
    class support (weighted).  ``ovo``: every ordered class pair ``(a, b)``
    scored with column ``a`` on the samples of ``a`` and ``b``; weighted
    averaging uses the pair's combined support.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if scheme not in ("ovr", "ovo") or average not in ("macro", "weighted"):
        raise ValueError(f"unsupported scheme/average {scheme}/{average}")
    if np.any(np.abs(scores.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("score rows must sum to 1 within 1e-6")
    k = scores.shape[1]
    present = [c for c in range(k) if np.any(labels == c)]
    if len(present) < 2:
        raise ValueError("AUROC needs at least two classes present")
    support = np.bincount(labels, minlength=k)
    values, weights = [], []
    if scheme == "ovr":
        missing = [c for c in range(k) if support[c] == 0]
        if missing:
            warnings.warn(f"classes {missing} have no positives; skipped", MetricWarning)
        for c in present:
            values.append(binary_auroc(scores[:, c], labels == c))
            weights.append(support[c])
    else:
        for a in present:
            for b in present:
                if a == b:
                    continue
                mask = (labels == a) | (labels == b)
                values.append(binary_auroc(scores[mask, a], labels[mask] == a))
                weights.append(support[a] + support[b])
    values = np.array(values)
    if average == "macro":
        return float(values.mean())
    w = np.array(weights, dtype=np.float64)
    return float((values * w).sum() / w.sum())


# ---------------------------------------------------------------- pool evaluation


def evaluate_pool(pool, clients, round_index: int | None = None) -> EvaluationReport:
    """Each client picks its model by train loss, then is scored on its test set.

    Accuracy is the mean of per-client accuracies; F1 and AUROC use the
    predictions pooled across clients.
    """
    from .federation import select_model

    accs, probs_all, labels_all, selections = [], [], [], []
    for client in clients:
        if len(client.test) == 0:
            raise ValueError(f"client {client.client_id} has an empty test set")
        choice = select_model(client, pool)
        probs = pool.models[choice].predict_proba(client.test.features)
        accs.append(float((probs.argmax(axis=1) == client.test.labels).mean()))
        probs_all.append(probs)
        labels_all.append(client.test.labels)
        selections.append(choice)
    probs = np.concatenate(probs_all)
    labels = np.concatenate(labels_all)
    k = probs.shape[1]
    macro, weighted = f1_scores(confusion_matrix(labels, probs.argmax(axis=1), k))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        au = {f"auroc_{s}_{a}": auroc(probs, labels, s, a) for s in ("ovr", "ovo") for a in ("macro", "weighted")}
    return EvaluationReport(
        round_index=round_index,
        client_accuracy=accs,
        accuracy=float(np.mean(accs)),
        f1_macro=macro,
        f1_weighted=weighted,
        selections=selections,
        **au,
    )


# ---------------------------------------------------------------- clustering


@dataclass
class ClusterTrace:
    assignments: np.ndarray  # rounds x clients, -1 for non-participants
    truth: np.ndarray

    @classmethod
    def from_history(cls, history, truth):
        return cls(np.array([r["assignments"] for r in history], dtype=np.int64), np.asarray(truth, dtype=np.int64))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", *[f"client_{i}" for i in range(self.assignments.shape[1])]])
        w.writerow(["truth", *self.truth.tolist()])
        for t, row in enumerate(self.assignments):
            w.writerow([t, *row.tolist()])
        return buf.getvalue()


def adjusted_rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("partitions must label the same items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return (x * (x - 1) / 2.0).sum()

    n = len(a)
    index = pairs(table)
    rows, cols = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = rows * cols / total if total else 0.0
    max_index = (rows + cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def clustering_agreement(trace: ClusterTrace, t: int) -> float:
    """ARI between round ``t`` assignments and the ground-truth clusters."""
    if not -len(trace.assignments) <= t < len(trace.assignments):
        raise IndexError(f"round {t} outside history of {len(trace.assignments)} rounds")
    row = trace.assignments[t]
    seen = row >= 0
    return adjusted_rand_index(row[seen], trace.truth[seen])


# ---------------------------------------------------------------- trials


def trial_statistics(scores, ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation over trials.

    ``ddof=0`` (population SD) reproduces published mean ± SD tables;
    pass ``ddof=1`` for the sample estimate.
    """
    scores = [float(s) for s in scores]
    if len(scores) < 2:
        raise ValueError("standard deviation needs at least two trials")
    mean = math.fsum(scores) / len(scores)
    var = math.fsum((s - mean) ** 2 for s in scores) / (len(scores) - ddof)
    return mean, math.sqrt(var)
