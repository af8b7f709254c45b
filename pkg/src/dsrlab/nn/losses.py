"""Loss functions returning ``(value, gradient)``."""

from __future__ import annotations

import numpy as np


def mse_loss(pred, target, mask=None):
    """Mean squared difference over all (unmasked) elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if mask is None:
        n = diff.size
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    m = np.asarray(mask, dtype=np.float64).reshape(mask.shape + (1,) * (diff.ndim - np.ndim(mask)))
    n = m.sum() * (diff.size / m.size)
    return float(np.sum(m * diff * diff) / n), 2.0 * m * diff / n


def nll_loss(log_probs, labels, mask=None):
    """``-mean log p(label)`` over frames; ``log_probs`` has classes last."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels)
    flat = log_probs.reshape(-1, log_probs.shape[-1])
    lab = labels.reshape(-1).astype(np.int64)
    if len(lab) != flat.shape[0]:
        raise ValueError("one label per frame is required")
    if np.any(lab < 0) or np.any(lab >= flat.shape[1]):
        raise ValueError("label out of range")
    w = np.ones(len(lab)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    n = w.sum()
    if n == 0:
        raise ValueError("no frames to score")
    picked = flat[np.arange(len(lab)), lab]
    grad = np.zeros_like(flat)
    grad[np.arange(len(lab)), lab] = -w / n
    return float(-(w * picked).sum() / n), grad.reshape(log_probs.shape)


def frame_accuracy(scores, labels, mask=None) -> float:
    pred = np.argmax(np.asarray(scores), axis=-1).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    w = np.ones(len(lab)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    return float(((pred == lab) * w).sum() / w.sum())
