"""Batch-mean losses over probability rows (natural log).

Probabilities are floored at ``LOG_FLOOR`` before taking logs so a zero
prediction gives a large finite penalty instead of ``inf``.  Zero-mass
entries of the first argument contribute nothing (``0 log 0 = 0``).
"""

import numpy as np

from .net import LOG_FLOOR


def _rows(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a batch of distributions, got shape {a.shape}")
    return a


def _pair(p, q):
    p, q = _rows(p, "p"), _rows(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return p, q


def _safe_log(a):
    return np.log(np.maximum(a, LOG_FLOOR))


def cross_entropy(target, pred) -> float:
    """Mean over rows of ``-<target, log pred>``."""
    target, pred = _pair(target, pred)
    terms = np.where(target > 0, target * _safe_log(pred), 0.0)
    return float(-terms.sum() / target.shape[0])


def entropy(pred) -> float:
    pred = _rows(pred, "pred")
    terms = np.where(pred > 0, pred * _safe_log(pred), 0.0)
    return float(-terms.sum() / pred.shape[0])


def kl_divergence(p, q) -> float:
    """Mean over rows of ``sum p log(p / q)``."""
    p, q = _pair(p, q)
    terms = np.where(p > 0, p * (_safe_log(p) - _safe_log(q)), 0.0)
    return float(terms.sum() / p.shape[0])


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
