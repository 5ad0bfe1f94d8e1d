from __future__ import annotations

import numpy as np


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax_cross_entropy(logits, target, weights=None):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is (A,) or (n, A); ``target`` an int or (n,) ints. Optional
    per-row ``weights`` (e.g. a padding mask) scale each row's contribution;
    the mean is taken over the weight total, and an all-zero weight vector
    yields zero loss and zero gradient.
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
        target = np.atleast_1d(target)
    target = np.asarray(target, dtype=np.int64)
    n, A = logits.shape
    if (target < 0).any() or (target >= A).any():
        raise ValueError(f"target class outside [0, {A})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total == 0:
        return 0.0, np.zeros_like(logits[0] if single else logits)
    logp = log_softmax(logits)
    nll = -logp[np.arange(n), target]
    loss = float((w * nll).sum() / total)
    grad = np.exp(logp)
    grad[np.arange(n), target] -= 1.0
    grad *= (w / total)[:, None]
    return loss, (grad[0] if single else grad)


def squared_error(pred, target, weights=None):
    """Mean of (pred - target)^2 over rows (summed over trailing axes) and its gradient."""
    pred = np.asarray(pred, dtype=float)
    diff = pred - target
    n = diff.shape[0]
    sq = (diff * diff).reshape(n, -1).sum(axis=1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total == 0:
        return 0.0, np.zeros_like(pred)
    loss = float((w * sq).sum() / total)
    shape = (n,) + (1,) * (diff.ndim - 1)
    grad = 2.0 * diff * (w / total).reshape(shape)
    return loss, grad
