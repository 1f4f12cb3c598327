"""Clustering evaluation against gold labels: NMI, ARI, Hungarian-matched
accuracy. All three are invariant to relabeling of either argument."""

from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction
from typing import Sequence

import numpy as np

from .clustering import hungarian

Labels = Sequence  # categorical labels: strings or small ints


def _check_lengths(y_true: Labels, y_pred: Labels) -> int:
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    if len(y_true) < 1:
        raise ValueError("labels must be nonempty")
    return len(y_true)


def _contingency(y_true: Labels, y_pred: Labels) -> np.ndarray:
    """Counts matrix, rows = true classes, cols = predicted clusters."""
    t_codes = {v: i for i, v in enumerate(dict.fromkeys(y_true))}
    p_codes = {v: i for i, v in enumerate(dict.fromkeys(y_pred))}
    table = np.zeros((len(t_codes), len(p_codes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        table[t_codes[t], p_codes[p]] += 1
    return table


def nmi(y_true: Labels, y_pred: Labels) -> float:
    """Normalized mutual information, geometric-mean normalization,
    natural log. Both partitions trivial -> 1.0; exactly one trivial -> 0.0."""
    n = _check_lengths(y_true, y_pred)
    table = _contingency(y_true, y_pred)
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    h_u = -sum((x / n) * math.log(x / n) for x in a if x > 0)
    h_v = -sum((x / n) * math.log(x / n) for x in b if x > 0)
    if h_u == 0.0 and h_v == 0.0:
        return 1.0
    if h_u == 0.0 or h_v == 0.0:
        return 0.0
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    return float(min(1.0, max(0.0, mi / math.sqrt(h_u * h_v))))


def _comb2(x: int) -> int:
    return x * (x - 1) // 2


def ari(y_true: Labels, y_pred: Labels) -> float:
    """Adjusted Rand index via the pair-counting formula, computed with exact
    rational arithmetic so closed-form cases come out exact in float."""
    n = _check_lengths(y_true, y_pred)
    if n < 2:
        raise ValueError("ARI requires at least 2 points")
    table = _contingency(y_true, y_pred)
    sum_ij = int(sum(_comb2(int(x)) for x in table.ravel()))
    sum_a = int(sum(_comb2(int(x)) for x in table.sum(axis=1)))
    sum_b = int(sum(_comb2(int(x)) for x in table.sum(axis=0)))
    expected = Fraction(sum_a * sum_b, _comb2(n))
    max_index = Fraction(sum_a + sum_b, 2)
    if max_index == expected:
        return 1.0  # both partitions trivial and identical in pair structure
    return float((sum_ij - expected) / (max_index - expected))


def clustering_accuracy(y_true: Labels, y_pred: Labels) -> float:
    """Accuracy under the optimal injective cluster-to-class mapping
    (maximum-weight matching on the confusion matrix)."""
    n = _check_lengths(y_true, y_pred)
    table = _contingency(y_true, y_pred)
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    _, neg_cost = hungarian(-padded.astype(np.float64))
    return float(-neg_cost / n)
