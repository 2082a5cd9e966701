"""Independent reference implementations used to check the package.

Written for clarity rather than speed, and deliberately sharing no code
with :mod:`plateflow` beyond the model container.
"""

import math
from functools import lru_cache

import numpy as np


def naive_forward(model, x):
    """Per-sample, per-layer loop; returns (z, logdet, per-layer scale sums)."""
    x = np.array(x, dtype=float)
    logdet = 0.0
    per_layer = []
    for layer in model.layers:
        a = x[layer.mask]
        b = x[~layer.mask]
        raw = layer.s_w2 @ np.tanh(layer.s_w1 @ a + layer.s_b1) + layer.s_b2
        s = model.scale_bound * np.tanh(raw / model.scale_bound)
        t = layer.t_w2 @ np.tanh(layer.t_w1 @ a + layer.t_b1) + layer.t_b2
        y = x.copy()
        y[~layer.mask] = b * np.exp(s) + t
        per_layer.append(float(np.sum(s)))
        logdet += float(np.sum(s))
        x = y
    return x, logdet, per_layer


def naive_log_prob(model, x):
    z, logdet, _ = naive_forward(model, x)
    return -0.5 * float(z @ z) - 0.5 * len(z) * math.log(2 * math.pi) + logdet


def numeric_grad(loss_fn, params, step=1e-5):
    """Central differences of ``loss_fn(params)`` for every entry of every array."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + step
            up = loss_fn(params)
            p[i] = old - step
            down = loss_fn(params)
            p[i] = old
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


def gaussian_mle_nll(x):
    """Mean NLL of ``x`` under its own maximum-likelihood full-covariance Gaussian."""
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    cov = np.cov(x, rowvar=False, bias=True)
    _, logdet = np.linalg.slogdet(cov)
    return 0.5 * (d * math.log(2 * math.pi) + logdet + d)


def trapezoid_2d(f, lo=-6.0, hi=6.0, step=0.02):
    g = np.arange(lo, hi + step / 2, step)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    vals = f(np.stack([xx.ravel(), yy.ravel()], axis=1)).reshape(xx.shape)
    w = np.ones_like(g)
    w[0] = w[-1] = 0.5
    return float(step * step * (w[:, None] * w[None, :] * vals).sum())


def ap_bruteforce(flags, n_gt):
    """Area under the interpolated PR curve, summed over recall steps.

    Every true positive raises recall by ``1/n_gt``; it is credited with the
    best precision reached at that recall level or any later one.
    """
    flags = list(flags)
    points = []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        points.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    prev_recall = 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_recall:
            best = max(p for rr, p in points[k:] if rr >= r)
            total += (r - prev_recall) * best
            prev_recall = r
    return total


def lev_recursive(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def mann_whitney_auc(pos, neg):
    """P(score_pos < score_neg) + 0.5 P(equal); low scores mean in-distribution."""
    pos = np.asarray(pos)[:, None]
    neg = np.asarray(neg)[None, :]
    return float(np.mean((pos < neg) + 0.5 * (pos == neg)))


def lev_table(words):
    """Distances between all ``words`` from the prefix recurrence.

    ``words`` must be closed under taking prefixes.  Row ``i`` and column
    ``j`` follow ``words``; each entry is built from the entries of the
    one-shorter prefixes, one length level at a time.
    """
    words = sorted(words, key=lambda w: (len(w), w))
    index = {w: i for i, w in enumerate(words)}
    n = len(words)
    parent = np.array([index[w[:-1]] if w else 0 for w in words])
    last = np.array([w[-1] if w else "" for w in words])
    lengths = np.array([len(w) for w in words])
    levels = [np.flatnonzero(lengths == k) for k in range(lengths.max() + 1)]
    d = np.zeros((n, n), dtype=np.int16)
    d[:, 0] = lengths
    d[0, :] = lengths
    for lvl in levels[1:]:
        for i in lvl:
            pi = parent[i]
            for cols in levels[1:]:
                pc = parent[cols]
                d[i, cols] = np.minimum(np.minimum(d[pi, cols] + 1, d[i, pc] + 1),
                                        d[pi, pc] + (last[cols] != last[i]))
    return words, d
