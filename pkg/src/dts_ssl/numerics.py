"""Small numerical helpers used by models and losses."""

from __future__ import annotations

import numpy as np

# Probabilities are clamped at this floor before any logarithm so that
# one-hot outputs produce large-but-finite losses.
PROB_CLAMP = 1e-12


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Backpropagate ``d_probs`` through a softmax that produced ``probs``.

    Rows are treated independently; inputs are (..., C).
    """
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot encode 1-based class ids into (n, num_classes) float rows."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels - 1] = 1.0
    return out


def round_half_up(x: float) -> int:
    """Round to the nearest integer with halves rounded up (no banker's rounding)."""
    return int(np.floor(x + 0.5))
