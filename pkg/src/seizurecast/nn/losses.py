"""Batch-mean losses and their gradients with respect to the loss inputs."""

from __future__ import annotations

import numpy as np

PROB_CLAMP = 1e-7


def _clamp(p):
    return np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(p, y) -> float:
    """Binary cross-entropy -(y ln p + (1-y) ln(1-p)), averaged over the batch."""
    p = np.atleast_1d(_clamp(p))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def bce_grad(p, y) -> np.ndarray:
    p = np.atleast_1d(_clamp(p))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return (-(y / p) + (1.0 - y) / (1.0 - p)) / p.size


def _check_classes(q, y):
    q = np.atleast_2d(np.asarray(q, dtype=float))
    y = np.atleast_1d(np.asarray(y)).astype(int)
    if y.shape[0] != q.shape[0]:
        raise ValueError("batch size mismatch between q and y")
    if np.any(y < 0) or np.any(y >= q.shape[1]):
        raise ValueError(f"class id outside [0, {q.shape[1]})")
    return q, y


def cce_loss(q, y) -> float:
    """Categorical cross-entropy -ln q[y] on softmax outputs, batch mean."""
    q, y = _check_classes(q, y)
    picked = np.clip(q[np.arange(len(y)), y], PROB_CLAMP, 1.0)
    return float(np.mean(-np.log(picked)))


def cce_grad(q, y) -> np.ndarray:
    q, y = _check_classes(q, y)
    rows = np.arange(len(y))
    g = np.zeros_like(q)
    g[rows, y] = -1.0 / (np.clip(q[rows, y], PROB_CLAMP, 1.0) * len(y))
    return g


def contrastive_loss(d, same, margin: float = 1.0) -> float:
    """same * d**2 + (1 - same) * max(margin - d, 0), batch mean.

    The dissimilar term is the plain (unsquared) hinge.
    """
    d = np.atleast_1d(np.asarray(d, dtype=float))
    same = np.atleast_1d(np.asarray(same, dtype=float))
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    return float(np.mean(same * d ** 2 + (1.0 - same) * np.maximum(margin - d, 0.0)))


def contrastive_grad(d, same, margin: float = 1.0) -> np.ndarray:
    d = np.atleast_1d(np.asarray(d, dtype=float))
    same = np.atleast_1d(np.asarray(same, dtype=float))
    hinge_active = (d < margin).astype(float)
    return (same * 2.0 * d - (1.0 - same) * hinge_active) / d.size
