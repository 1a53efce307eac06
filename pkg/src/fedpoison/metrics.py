"""Classification metrics."""

from __future__ import annotations

import numpy as np


def _check(predictions, labels, c):
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("predictions and labels must be 1-D and equal length")
    if p.size == 0:
        raise ValueError("empty input")
    for name, a in (("predictions", p), ("labels", t)):
        if a.min() < 0 or a.max() >= c:
            raise ValueError(f"{name} must lie in [0, {c})")
    return p, t


def confusion(predictions, labels, c: int) -> np.ndarray:
    """c x c counts; rows are true classes, columns predicted classes."""
    p, t = _check(predictions, labels, c)
    return np.bincount(t * c + p, minlength=c * c).reshape(c, c)


def per_class_f1(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """F1 per class and a mask of classes that appear as truth or prediction."""
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, (pred + true) > 0


def macro_f1(predictions, labels, c: int) -> float:
    """Unweighted mean of per-class F1.

    A class with neither true nor predicted samples is left out of the mean,
    so small client shards are not penalized for classes they never hold.
    """
    f1, seen = per_class_f1(confusion(predictions, labels, c))
    return float(f1[seen].mean())


def weighted_f1(predictions, labels, c: int) -> float:
    """Per-class F1 averaged with weights proportional to true class support."""
    cm = confusion(predictions, labels, c)
    f1, _ = per_class_f1(cm)
    support = cm.sum(axis=1)
    return float(np.sum(f1 * support) / support.sum())


def f1_score(predictions, labels, c: int, average: str = "macro") -> float:
    if average == "macro":
        return macro_f1(predictions, labels, c)
    if average == "weighted":
        return weighted_f1(predictions, labels, c)
    raise ValueError(f"unknown F1 average {average!r}")


def accuracy(predictions, labels) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))
