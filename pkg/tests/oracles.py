"""Independent reference implementations used only by the tests.

Each oracle is written the slow, obvious way so it shares no code path with
the package under test.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def gini_double_sum(values) -> float:
    a = [float(v) for v in values]
    n = len(a)
    mean = sum(a) / n
    if mean == 0:
        return 0.0
    total = 0.0
    for x in a:
        for y in a:
            total += abs(x - y)
    return total / (2 * n * n * mean)


def cosine_loop(u, v) -> float:
    dot = sum(x * y for x, y in zip(u, v))
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(y * y for y in v))
    if nu == 0 or nv == 0:
        return 0.0
    return dot / (nu * nv)


def ring_cost_loop(sigma, hists) -> float:
    n = len(sigma)
    return sum(cosine_loop(hists[sigma[p]], hists[sigma[(p + 1) % n]]) for p in range(n))


def best_ring_exhaustive(hists):
    """Minimum ring cost over all (n-1)!/2 distinct cycles (client 0 fixed first)."""
    n = len(hists)
    best = math.inf
    for rest in itertools.permutations(range(1, n)):
        if n > 2 and rest[0] > rest[-1]:  # skip mirror images
            continue
        best = min(best, ring_cost_loop((0,) + rest, hists))
    return best


def dense_eigenvalues(matrix) -> np.ndarray:
    return np.linalg.eigvals(np.asarray(matrix, dtype=np.float64))


def match_multisets(a, b) -> float:
    """Largest distance after greedily pairing two complex multisets."""
    b = list(b)
    worst = 0.0
    for x in a:
        d = [abs(x - y) for y in b]
        k = int(np.argmin(d))
        worst = max(worst, d[k])
        b.pop(k)
    return worst


def central_difference(f, x: np.ndarray, idx, h: float = 1e-6) -> np.ndarray:
    """Numerical partial derivatives of scalar ``f`` at the flat positions ``idx``."""
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in dims)
    return header + payload
