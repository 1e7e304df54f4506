from __future__ import annotations

import numpy as np


def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def per_class_f1(confusion) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    # classes with no true positives (including empty ones) score 0
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=tp > 0)


def macro_f1(confusion) -> float:
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    return float(per_class_f1(cm).mean())
