"""Independent numeric oracles shared by the test suite.

Everything here is deliberately written against plain numpy, with no
dependency on the package's autodiff tape, so tape-vs-oracle comparisons
stay meaningful.
"""

from __future__ import annotations

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, one probe per element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def best_min_dist_subset(points: np.ndarray, k: int) -> float:
    """Exhaustive max over k-subsets of the minimum pairwise distance."""
    from itertools import combinations

    pts = np.asarray(points, dtype=np.float64)
    best = -1.0
    for idx in combinations(range(len(pts)), k):
        sub = pts[list(idx)]
        dmin = np.inf
        for i in range(k):
            for j in range(i + 1, k):
                dmin = min(dmin, float(np.hypot(*(sub[i] - sub[j]))))
        best = max(best, dmin)
    return best
