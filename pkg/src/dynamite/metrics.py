from __future__ import annotations

import numpy as np


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    return np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def per_class_f1(preds, labels, n_classes: int) -> np.ndarray:
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    # classes absent from both predictions and labels score 0
    return np.divide(2.0 * tp, denom, out=np.zeros(n_classes), where=denom > 0)


def macro_f1(preds, labels, n_classes: int) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ValueError("macro_f1 of an empty set is undefined")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have equal length")
    return float(per_class_f1(preds, labels, n_classes).mean())
