"""Pure-numpy reference kernels."""
import numpy as np


def sq_dist(x, mu):
    """Squared Euclidean distances, (N, E) x (J, E) -> (N, J)."""
    diff = x[:, None, :] - mu[None, :, :]
    return np.einsum("nje,nje->nj", diff, diff)


def masked_bce(z, y, hp, hm):
    """Elementwise masked BCE terms and logit gradients.

    Returns (pos_terms, neg_terms, grad), every array shaped like ``z``.
    ``pos_terms`` holds ``-hp*y*log(sigmoid(z))`` and ``neg_terms``
    ``-hm*(1-y)*log(1-sigmoid(z))``.
    """
    # log(sigmoid(z)) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
    sp_neg = np.logaddexp(0.0, -z)
    sp_pos = np.logaddexp(0.0, z)
    p = sigmoid(z)
    pos = hp * y * sp_neg
    neg = hm * (1.0 - y) * sp_pos
    grad = hp * y * (p - 1.0) + hm * (1.0 - y) * p
    return pos, neg, grad


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def average_precision(scores, labels):
    """Per-class AP over columns. Classes without positives get NaN."""
    n, g = scores.shape
    out = np.full(g, np.nan)
    idx = np.arange(n)
    for c in range(g):
        y = labels[:, c]
        npos = y.sum()
        if npos == 0:
            continue
        order = np.lexsort((idx, -scores[:, c]))
        hits = y[order].astype(np.float64)
        cum = np.cumsum(hits)
        ranks = np.arange(1, n + 1)
        out[c] = float(np.sum((cum / ranks) * hits) / npos)
    return out


def max_project(scores, member, n_out):
    """out[:, member[g]] = max over g of scores[:, g]; -1 entries skipped."""
    out = np.zeros((scores.shape[0], n_out))
    for g in range(scores.shape[1]):
        j = member[g]
        if j >= 0:
            np.maximum(out[:, j], scores[:, g], out=out[:, j])
    return out
