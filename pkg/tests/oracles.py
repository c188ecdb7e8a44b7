"""Independent brute-force references used across the test suite."""

from fractions import Fraction

import numpy as np


def pair_count_auc(scores, labels) -> Fraction:
    """O(n^2) Mann-Whitney: concordant pairs plus half of tied pairs, as an exact fraction."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else 1 if p == q else 0
    return Fraction(twice, 2 * len(pos) * len(neg))


def exhaustive_best_split(x, g, h, lam, gamma, min_child_weight=0.0, rtol=1e-10):
    """Scan every (feature, midpoint) pair; returns (gain, feature, threshold) or None.

    Ties keep the first candidate found: lowest feature, then lowest threshold.
    Gains within ``rtol`` of the incumbent count as ties, since mirrored or
    repeated partitions have equal gains that differ only by rounding.
    """
    n, d = x.shape
    G, H = g.sum(), h.sum()
    parent = G * G / (H + lam)
    best = None
    for f in range(d):
        values = np.unique(x[:, f])
        for a, b in zip(values[:-1], values[1:]):
            thr = (a + b) / 2.0
            if thr <= a:
                thr = b
            left = x[:, f] < thr
            gl, hl = g[left].sum(), h[left].sum()
            gr, hr = G - gl, H - hl
            if hl < min_child_weight or hr < min_child_weight:
                continue
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma
            if gain > 0 and (best is None or gain > best[0] + rtol * abs(best[0])):
                best = (gain, f, thr)
    return best


def central_difference(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def reference_tree(x, g, h, max_depth, eta, lam, gamma, min_child_weight):
    """Recursive exhaustive-search tree as nested tuples.

    Internal nodes are ``("split", feature, threshold, gain, left, right)``,
    leaves ``("leaf", value)``.
    """

    def grow(rows, depth):
        G, H = g[rows].sum(), h[rows].sum()
        leaf = ("leaf", -eta * G / (H + lam))
        if depth == max_depth:
            return leaf
        best = exhaustive_best_split(x[rows], g[rows], h[rows], lam, gamma, min_child_weight)
        if best is None:
            return leaf
        gain, f, thr = best
        left = rows[x[rows, f] < thr]
        right = rows[x[rows, f] >= thr]
        return ("split", f, thr, gain, grow(left, depth + 1), grow(right, depth + 1))

    return grow(np.arange(x.shape[0]), 0)


def tree_as_tuple(tree, node=0):
    """Convert an array-encoded tree into the nested form used by ``reference_tree``."""
    if tree.feature[node] < 0:
        return ("leaf", float(tree.value[node]))
    return (
        "split",
        int(tree.feature[node]),
        float(tree.threshold[node]),
        float(tree.gain[node]),
        tree_as_tuple(tree, tree.left[node]),
        tree_as_tuple(tree, tree.right[node]),
    )


def trees_match(a, b, tol=1e-9):
    if a[0] != b[0]:
        return False
    if a[0] == "leaf":
        return abs(a[1] - b[1]) <= tol * max(1.0, abs(a[1]))
    return (
        a[1] == b[1]
        and a[2] == b[2]
        and abs(a[3] - b[3]) <= tol * max(1.0, abs(a[3]))
        and trees_match(a[4], b[4], tol)
        and trees_match(a[5], b[5], tol)
    )
