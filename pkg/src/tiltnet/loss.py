"""Batch loss layers over score matrices.

Both losses consume the n-by-C score matrix F of one batch (row j = scores of
example j, column y = class y) and return (log_likelihood, gradient) with the
gradient oriented for ascent; the optimizer owns signs and scaling. The
discriminative objective scores the class posterior; the generative objective
scores the images themselves, with the batch standing in for the reference
distribution through self-normalized importance weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, ShapeError


def _validate(scores, labels):
    f = np.asarray(scores, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"scores must be 2-D [n, C], got shape {f.shape}")
    n, c = f.shape
    if n < 1 or c < 2:
        raise ShapeError(f"scores must have n >= 1 rows and C >= 2 columns, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise NumericsError("non-finite scores")
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    return f, y.astype(np.int64)


def disc_loss_and_grad(scores, labels):
    """Class-posterior log-likelihood of a batch and its score gradient.

    Returns the sum over examples of the log row-softmax probability of the
    true label, and the n-by-C matrix (indicator of the label) - (row
    softmax). Each row of the gradient sums to zero.
    """
    f, y = _validate(scores, labels)
    n = f.shape[0]
    shifted = f - f.max(axis=1, keepdims=True)
    expf = np.exp(shifted)
    rowsum = expf.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(rowsum)
    ll = float(log_probs[np.arange(n), y].sum())
    grad = -expf / rowsum
    grad[np.arange(n), y] += 1.0
    return ll, grad


def gen_loss_and_grad(scores, labels):
    """Image log-likelihood of a batch and its score gradient.

    Per example i the likelihood compares exp(F[i, y_i]) against the batch
    mean of exp over column y_i, i.e. the batch itself approximates the
    reference distribution. The per-example gradients aggregate to the
    closed form (indicator that example j carries class y) - n_y * W[j, y],
    where W[., y] is the softmax of column y over the batch and n_y counts
    examples of class y; each column of the gradient sums to zero.
    """
    f, y = _validate(scores, labels)
    n, c = f.shape
    if n < 2:
        raise ValueError("generative loss needs a batch of n >= 2 examples")
    shifted = f - f.max(axis=0, keepdims=True)
    expf = np.exp(shifted)
    colsum = expf.sum(axis=0, keepdims=True)
    log_batch_softmax = shifted - np.log(colsum)
    ll = float((log_batch_softmax[np.arange(n), y] + np.log(n)).sum())
    counts = np.bincount(y, minlength=c).astype(np.float64)
    grad = -(expf / colsum) * counts
    grad[np.arange(n), y] += 1.0
    return ll, grad


@dataclass(frozen=True)
class ImportanceWeights:
    """Normalized in-batch importance weights for one class column plus the
    effective sample size they support."""
    class_index: int
    weights: np.ndarray
    ess: float


def importance_weights(scores, class_index: int) -> ImportanceWeights:
    """Softmax of one score column over the batch; weights sum to one."""
    f = np.asarray(scores, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise NumericsError("non-finite scores")
    if not 0 <= class_index < f.shape[1]:
        raise ValueError(f"class index {class_index} out of range for {f.shape[1]} columns")
    col = f[:, class_index]
    w = np.exp(col - col.max())
    w /= w.sum()
    return ImportanceWeights(class_index, w, effective_sample_size(w))


def effective_sample_size(weights) -> float:
    """1 / sum(w^2) for normalized weights; n when uniform, 1 when degenerate."""
    w = weights.weights if isinstance(weights, ImportanceWeights) else np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ShapeError("weights must be a non-empty vector")
    if np.any(w < 0.0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must sum to one")
    return float(1.0 / np.square(w).sum())


def per_class_ess(scores, labels) -> dict:
    """Effective sample size of the in-batch weights for every class present
    in the labels."""
    f, y = _validate(scores, labels)
    return {int(k): importance_weights(f, int(k)).ess for k in np.unique(y)}
