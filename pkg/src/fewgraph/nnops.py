"""Differentiable primitives with hand-derived backward passes.

Everything operates on float64 numpy arrays. Each `*_forward` returns the
values plus whatever intermediates its paired `*_backward` needs; the pairs
are verified against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-likelihood over rows.

    Returns (loss, dloss/dlogits). `targets` are column indices.
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    return loss, grad


def unit_rows(x: np.ndarray):
    """Row-normalize; returns (normalized, norms)."""
    norms = np.linalg.norm(x, axis=1)
    return x / norms[:, None], norms


def unit_rows_backward(xhat, norms, dxhat):
    """Backward of row normalization: dx = (g - (g.xhat) xhat) / |x|."""
    inner = (dxhat * xhat).sum(axis=1, keepdims=True)
    return (dxhat - inner * xhat) / norms[:, None]


def cosine_scores(queries: np.ndarray, refs: np.ndarray):
    """All-pairs cosine similarity; returns (scores (B,C), cache)."""
    qhat, qn = unit_rows(queries)
    rhat, rn = unit_rows(refs)
    scores = qhat @ rhat.T
    return scores, (qhat, qn, rhat, rn)


def cosine_scores_backward(cache, dscores):
    qhat, qn, rhat, rn = cache
    dq = unit_rows_backward(qhat, qn, dscores @ rhat)
    dr = unit_rows_backward(rhat, rn, dscores.T @ qhat)
    return dq, dr


def cosine_ce(queries, targets, refs, scale):
    """Cross-entropy over scaled cosine logits.

    Returns (loss, dqueries, drefs). `targets` index rows of `refs`.
    """
    scores, cache = cosine_scores(queries, refs)
    loss, dlogits = cross_entropy(scale * scores, targets)
    dq, dr = cosine_scores_backward(cache, scale * dlogits)
    return loss, dq, dr


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Per-row normalization with affine rescale; returns (y, cache)."""
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * istd[:, None]
    return gamma * xhat + beta, (xhat, istd)


def layer_norm_backward(cache, gamma, dy):
    xhat, istd = cache
    dxhat = dy * gamma
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = istd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta
