"""Pure-Python retrieval kernels, used when the compiled extension is absent."""

from __future__ import annotations

import math

import numpy as np


def _band(n: int, m: int, radius: int) -> int:
    if radius < 0:
        return max(n, m)
    return max(radius, abs(n - m))


def dtw(a, b, radius: int = -1) -> float:
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("dtw needs nonempty inputs")
    band = _band(n, m, radius)
    inf = math.inf
    prev = [0.0] + [inf] * m
    for i in range(1, n + 1):
        cur = [inf] * (m + 1)
        ai = a[i - 1]
        for j in range(max(1, i - band), min(m, i + band) + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(ai - b[j - 1]) + best
        prev = cur
    return prev[m]


def dtw_many(a, candidates, radius: int = -1) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.float64)
    if len(a) == 0 or candidates.shape[1] == 0:
        raise ValueError("dtw needs nonempty inputs")
    return np.array([dtw(a, row, radius) for row in candidates])


def corr_many(a, candidates) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if c.shape[1] != a.shape[0]:
        raise ValueError("length mismatch")
    if a.shape[0] < 2:
        raise ValueError("need at least 2 observations")
    da = a - a.mean()
    dc = c - c.mean(axis=1, keepdims=True)
    saa = da @ da
    sbb = np.einsum("ij,ij->i", dc, dc)
    sab = dc @ da
    with np.errstate(invalid="ignore", divide="ignore"):
        out = sab / np.sqrt(saa * sbb)
    out[(sbb == 0) | (saa == 0)] = np.nan
    return np.clip(out, -1.0, 1.0)
