from __future__ import annotations

import numpy as np

BCE_EPS = 1e-7


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient wrt ``pred``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` so the loss stays finite.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    if p.size == 0:
        raise ValueError("bce_loss needs a non-empty batch")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    grad = (p - t) / (p * (1.0 - p)) / p.size
    return float(loss), grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns the loss and ``(softmax - onehot) / batch``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    n, k = z.shape
    if n == 0:
        raise ValueError("softmax_cross_entropy needs a non-empty batch")
    if y.shape != (n,) or np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    y = y.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, y]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    return loss, grad / n
