"""Slow, independent reference implementations used only by the tests."""
import math

import numpy as np


def simplex_projection_sort(v):
    """Euclidean projection onto the simplex, sort-and-scan (Duchi et al. style)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = max(j for j in range(1, len(u) + 1) if u[j - 1] - (css[j - 1] - 1) / j > 0)
    theta = (css[rho - 1] - 1) / rho
    return np.maximum(v - theta, 0.0)


def simplex_projection_bisect(v, iters=200):
    """Same projection found by bisection on the threshold: sum(max(v - t, 0)) = 1."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0.0)


def auroc_pairs(scores, labels):
    """AUROC by enumerating every positive/negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def clip_loss_loops(ze, zt, tau):
    """Symmetric cross-entropy written with explicit loops."""
    ze = np.asarray(ze, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    n = len(ze)
    s = np.array([[ze[i] @ zt[j] / (np.linalg.norm(ze[i]) * np.linalg.norm(zt[j]))
                   for j in range(n)] for i in range(n)]) / tau
    row = col = 0.0
    for i in range(n):
        row -= s[i, i] - math.log(sum(math.exp(s[i, k]) for k in range(n)))
        col -= s[i, i] - math.log(sum(math.exp(s[k, i]) for k in range(n)))
    return row / n + col / n
