"""Brute-force reference computations shared by unit and acceptance tests."""
import itertools
import math

import numpy as np


def best_partition_inertia(points: np.ndarray, C: int) -> float:
    """Minimum within-cluster sum of squares over every labelling into <= C groups."""
    X = np.asarray(points, dtype=float).reshape(len(points), -1)
    n = len(X)
    labels = np.array(list(itertools.product(range(C), repeat=n)))  # (C**n, n)
    best = math.inf
    for chunk in np.array_split(labels, max(1, len(labels) // 4096)):
        onehot = (chunk[:, :, None] == np.arange(C)).astype(float)  # (L, n, C)
        counts = onehot.sum(axis=1)  # (L, C)
        sums = np.einsum("lnc,nd->lcd", onehot, X)
        sq = np.einsum("lnc,n->lc", onehot, np.sum(X * X, axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            within = sq - np.where(counts > 0, np.sum(sums * sums, axis=2) / counts, 0.0)
        best = min(best, float(within.sum(axis=1).min()))
    return max(best, 0.0)


def var_sorted_scan(errors, alpha_num: int, alpha_den: int) -> float:
    """Scan candidates in ascending order; first with count(E >= e) * den <= (den - num) * n.

    count(E >= e) is n minus the position where the run of e starts in the sorted list.
    """
    n = len(errors)
    ordered = sorted(errors)
    run_start = 0
    for i, e in enumerate(ordered):
        if i == 0 or e != ordered[i - 1]:
            run_start = i
        if (n - run_start) * alpha_den <= (alpha_den - alpha_num) * n:
            return e
    return ordered[-1]


def c_best_enumeration(ade, fde) -> int:
    """Best expert by exhaustive pairwise comparisons: rank = 1 + #experts strictly ahead."""
    C = len(ade)

    def ranks(m):
        return [1 + sum(1 for j in range(C) if m[j] < m[c] or (m[j] == m[c] and j < c)) for c in range(C)]

    ra, rf = ranks(ade), ranks(fde)
    totals = [ra[c] + rf[c] for c in range(C)]
    best = min(totals)
    return next(c for c in range(C) if totals[c] == best)
