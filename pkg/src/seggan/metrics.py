"""Confusion-matrix bookkeeping and mean intersection-over-union."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError
from .losses import IGNORE_VALUE


def new_confusion_matrix(num_classes):
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, pred, truth, ignore_value=IGNORE_VALUE):
    """Add pixel counts into cm[truth, pred]; ignored truth pixels are skipped.

    Mutates and returns cm. Accumulation is pure counting, so the result is
    independent of how pixels are sharded across calls.
    """
    c = cm.shape[0]
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ConfigurationError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= c):
        raise ConfigurationError(f"predictions must lie in [0, {c})")
    valid = truth != ignore_value
    if valid.any() and (truth[valid].min() < 0 or truth[valid].max() >= c):
        raise ConfigurationError(
            f"truth labels must lie in [0, {c}) apart from the ignore value"
        )
    idx = truth[valid].astype(np.int64) * c + pred[valid].astype(np.int64)
    cm += np.bincount(idx, minlength=c * c).reshape(c, c)
    return cm


def per_class_iou(cm):
    """Returns (iou, defined): iou[c] = tp / (tp + fn + fp), NaN where the
    class appears in neither truth nor prediction (0/0)."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    defined = denom > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou, defined


def mean_iou(cm):
    """Mean of the defined per-class IoUs; NaN if no class is defined.

    Uses exact summation so the result does not depend on class order.
    """
    iou, defined = per_class_iou(cm)
    n = int(defined.sum())
    if n == 0:
        return float("nan")
    return math.fsum(iou[defined]) / n


def predict_labels(prob_map):
    """Argmax over channels; ties resolve to the lowest class index."""
    return np.argmax(prob_map, axis=1)
