"""Independent reference computations used by the tests.

Nothing here imports the package's autodiff; these are plain numpy/mpmath
routines that recompute values the library produces.
"""
from __future__ import annotations

import mpmath
import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, abs_floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, abs_floor); the floor only guards exact zeros."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), abs_floor)
    return float((np.abs(a - b) / denom).max(initial=0.0))


def np_log_softmax(z):
    z = np.asarray(z, float)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def np_cross_entropy(logits, target):
    logits = np.atleast_2d(np.asarray(logits, float))
    t = np.asarray(target)
    if np.issubdtype(t.dtype, np.integer):
        t = np.eye(logits.shape[1])[np.atleast_1d(t)]
    return float(np.mean(-(np.atleast_2d(t) * np_log_softmax(logits)).sum(axis=1)))


def hp_neg_log_softmax(logits, index, dps: int = 50) -> float:
    """-log softmax(logits)[index] at high precision."""
    with mpmath.workdps(dps):
        zs = [mpmath.mpf(v) for v in logits]
        return float(mpmath.log(sum(mpmath.e ** z for z in zs)) - zs[index])


def hp_entropy(p, dps: int = 50) -> float:
    with mpmath.workdps(dps):
        return float(-sum(mpmath.mpf(v) * mpmath.log(mpmath.mpf(v)) for v in p if v > 0))


def brute_force_aggregate(matrices):
    """Sum-and-argmax with explicit loops; ties go to the lowest split index."""
    k, m = len(matrices[0]), len(matrices[0][0])
    total = [[0.0] * m for _ in range(k)]
    for mat in matrices:
        for r in range(k):
            for c in range(m):
                total[r][c] += float(mat[r][c])
    out = []
    for r in range(k):
        best, best_c = None, 0
        for c in range(m):
            if best is None or total[r][c] > best:
                best, best_c = total[r][c], c
        out.append(best_c)
    return total, out


def irm_dummy_derivative_fd(logits, labels, weights, step: float = 1e-5) -> float:
    """d/dw of the weighted mean cross-entropy of ``w * logits`` at w=1, by central differences."""
    weights = np.asarray(weights, float)

    def risk(w):
        lp = np_log_softmax(w * np.asarray(logits, float))
        ce = -lp[np.arange(len(labels)), labels]
        return float((weights * ce).sum() / weights.sum())

    return (risk(1 + step) - risk(1 - step)) / (2 * step)
