"""Shared evaluation metrics.

Every training path (federated, self-train, dense, centralized) scores
predictions through this one module so comparisons stay apples to apples.
"""

from __future__ import annotations

import numpy as np

from .popdyn import PopularityVector


def _vec(v) -> np.ndarray:
    if isinstance(v, PopularityVector):
        return v.probs
    return np.asarray(v, dtype=np.float64)


def rmse(pred, truth) -> float:
    """Root mean squared per-content difference."""
    p = _vec(pred)
    t = _vec(truth)
    if p.shape != t.shape:
        raise ValueError("prediction and truth lengths differ")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mean_rmse(pred_rows: np.ndarray, truth_rows: np.ndarray) -> float:
    """Mean of per-row RMSEs for (rows, n_contents) batches."""
    p = np.asarray(pred_rows, dtype=np.float64)
    t = np.asarray(truth_rows, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("prediction and truth shapes differ")
    return float(np.mean(np.sqrt(np.mean((p - t) ** 2, axis=-1))))
