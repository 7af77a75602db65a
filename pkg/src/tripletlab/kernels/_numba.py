"""Numba-compiled kernels; same contracts as ``_numpy``."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def sq_dist(x, mu):
    n, e = x.shape
    j = mu.shape[0]
    out = np.empty((n, j))
    for a in range(n):
        for b in range(j):
            acc = 0.0
            for k in range(e):
                d = x[a, k] - mu[b, k]
                acc += d * d
            out[a, b] = acc
    return out


@njit(cache=True)
def _softplus(v):
    if v > 0.0:
        return v + math.log1p(math.exp(-v))
    return math.log1p(math.exp(v))


@njit(cache=True)
def _sigmoid(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    ex = math.exp(v)
    return ex / (1.0 + ex)


@njit(cache=True)
def masked_bce(z, y, hp, hm):
    n, g = z.shape
    pos = np.zeros((n, g))
    neg = np.zeros((n, g))
    grad = np.zeros((n, g))
    for a in range(n):
        for b in range(g):
            v = z[a, b]
            p = _sigmoid(v)
            wp = hp[a, b] * y[a, b]
            wn = hm[a, b] * (1.0 - y[a, b])
            pos[a, b] = wp * _softplus(-v)
            neg[a, b] = wn * _softplus(v)
            grad[a, b] = wp * (p - 1.0) + wn * p
    return pos, neg, grad


@njit(cache=True)
def sigmoid(x):
    flat = x.ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        out[i] = _sigmoid(flat[i])
    return out.reshape(x.shape)


@njit(cache=True)
def average_precision(scores, labels):
    n, g = scores.shape
    out = np.full(g, np.nan)
    for c in range(g):
        npos = 0.0
        for a in range(n):
            npos += labels[a, c]
        if npos == 0.0:
            continue
        # stable sort on -score keeps ascending frame index among ties
        order = np.argsort(-scores[:, c], kind="mergesort")
        hits = 0.0
        acc = 0.0
        for r in range(n):
            if labels[order[r], c] > 0:
                hits += 1.0
                acc += hits / (r + 1)
        out[c] = acc / npos
    return out


@njit(cache=True)
def max_project(scores, member, n_out):
    f, g = scores.shape
    out = np.zeros((f, n_out))
    for b in range(g):
        j = member[b]
        if j < 0:
            continue
        for a in range(f):
            if scores[a, b] > out[a, j]:
                out[a, j] = scores[a, b]
    return out
