import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdi._seed import derive_rng
from cdi.metrics import ari, clustering_accuracy, nmi

# -- independent oracles ------------------------------------------------------


def nmi_contingency_oracle(y_true, y_pred):
    """Direct contingency-table evaluation, geometric-mean normalization."""
    n = len(y_true)
    ct = Counter(zip(y_true, y_pred))
    a = Counter(y_true)
    b = Counter(y_pred)
    h_u = -sum(c / n * math.log(c / n) for c in a.values())
    h_v = -sum(c / n * math.log(c / n) for c in b.values())
    if h_u == 0.0 and h_v == 0.0:
        return 1.0
    if h_u == 0.0 or h_v == 0.0:
        return 0.0
    mi = sum(
        c / n * math.log(n * c / (a[t] * b[p])) for (t, p), c in ct.items()
    )
    return mi / math.sqrt(h_u * h_v)


def ari_pair_counting_oracle(y_true, y_pred):
    """Count agreeing/disagreeing point pairs directly."""
    n = len(y_true)
    both = same_t = same_p = 0
    for i, j in itertools.combinations(range(n), 2):
        st_ = y_true[i] == y_true[j]
        sp = y_pred[i] == y_pred[j]
        both += st_ and sp
        same_t += st_
        same_p += sp
    total = n * (n - 1) // 2
    expected = same_t * same_p / total
    max_index = (same_t + same_p) / 2
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def acc_exhaustive_oracle(y_true, y_pred):
    """Maximize matches over every injective cluster-to-class map."""
    classes = sorted(set(y_true), key=str)
    clusters = sorted(set(y_pred), key=str)
    counts = Counter(zip(y_pred, y_true))
    n = len(y_true)
    size = max(len(classes), len(clusters))
    best = 0
    # consider maps from clusters into padded class slots
    padded = classes + [object() for _ in range(size - len(classes))]
    for perm in itertools.permutations(padded, len(clusters)):
        total = sum(counts.get((c, perm[i]), 0) for i, c in enumerate(clusters))
        best = max(best, total)
    return best / n


# -- closed-form cases --------------------------------------------------------


class TestNmi:
    def test_perfect(self):
        assert nmi([0, 0, 1, 1, 2], [5, 5, 7, 7, 9]) == pytest.approx(1.0)

    def test_constant_prediction(self):
        assert nmi([0, 0, 1, 1], [0, 0, 0, 0]) == 0.0

    def test_independent_partitions(self):
        assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_both_trivial(self):
        assert nmi([3, 3, 3], [1, 1, 1]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nmi([0, 1], [0, 1, 2])


class TestAri:
    def test_perfect(self):
        assert ari([0, 1, 1, 0], ["a", "b", "b", "a"]) == pytest.approx(1.0)

    def test_known_fraction(self):
        assert ari([0, 0, 1, 1], [0, 0, 1, 2]) == pytest.approx(4 / 7, abs=1e-15)

    def test_trivial_identical(self):
        assert ari([0, 0, 0], [1, 1, 1]) == 1.0

    def test_requires_two_points(self):
        with pytest.raises(ValueError):
            ari([0], [0])


class TestClusteringAccuracy:
    def test_relabeling_invariance(self):
        assert clustering_accuracy([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0

    def test_constant_prediction_balanced(self):
        y_true = [0, 1, 2, 0, 1, 2]
        assert clustering_accuracy(y_true, [9] * 6) == pytest.approx(1 / 3)

    def test_more_clusters_than_classes(self):
        # an optimal injective matching can fall below the largest-class share
        # when clusters outnumber classes; the single best confusion entry is
        # the guaranteed floor
        y_true = ["A", "A", "A", "A", "B", "C"]
        y_pred = [0, 1, 0, 1, 0, 1]
        assert clustering_accuracy(y_true, y_pred) == pytest.approx(3 / 6)


# -- oracle comparisons -------------------------------------------------------


def _random_label_pairs(count, n_max=8, n_min=1):
    rng = derive_rng(59)
    for _ in range(count):
        n = int(rng.integers(n_min, n_max + 1))
        yield (
            rng.integers(0, 4, size=n).tolist(),
            rng.integers(0, 4, size=n).tolist(),
        )


def test_nmi_matches_contingency_oracle():
    for y_true, y_pred in _random_label_pairs(200):
        assert nmi(y_true, y_pred) == pytest.approx(
            min(1.0, max(0.0, nmi_contingency_oracle(y_true, y_pred))), abs=1e-9
        )


def test_ari_matches_pair_counting_oracle():
    for y_true, y_pred in _random_label_pairs(200, n_min=2):
        assert ari(y_true, y_pred) == pytest.approx(
            ari_pair_counting_oracle(y_true, y_pred), abs=1e-9
        )


def test_acc_matches_exhaustive_oracle():
    for y_true, y_pred in _random_label_pairs(200):
        assert clustering_accuracy(y_true, y_pred) == pytest.approx(
            acc_exhaustive_oracle(y_true, y_pred), abs=1e-12
        )


# -- properties ---------------------------------------------------------------

label_vectors = st.integers(2, 8).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 3), min_size=n, max_size=n),
        st.lists(st.integers(0, 3), min_size=n, max_size=n),
    )
)


@settings(max_examples=150, deadline=None)
@given(label_vectors, st.permutations(list(range(4))))
def test_relabeling_invariance(pair, perm):
    y_true, y_pred = pair
    renamed = [perm[p] for p in y_pred]
    assert nmi(y_true, renamed) == pytest.approx(nmi(y_true, y_pred), abs=1e-12)
    assert ari(y_true, renamed) == pytest.approx(ari(y_true, y_pred), abs=1e-12)
    assert clustering_accuracy(y_true, renamed) == pytest.approx(
        clustering_accuracy(y_true, y_pred), abs=1e-12
    )


@settings(max_examples=150, deadline=None)
@given(label_vectors)
def test_nmi_ari_symmetric(pair):
    y_true, y_pred = pair
    assert nmi(y_true, y_pred) == pytest.approx(nmi(y_pred, y_true), abs=1e-12)
    assert ari(y_true, y_pred) == pytest.approx(ari(y_pred, y_true), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(label_vectors)
def test_acc_floor_is_best_confusion_entry(pair):
    y_true, y_pred = pair
    n = len(y_true)
    best_pair = max(Counter(zip(y_true, y_pred)).values())
    assert clustering_accuracy(y_true, y_pred) >= best_pair / n - 1e-12


@settings(max_examples=150, deadline=None)
@given(label_vectors)
def test_ranges(pair):
    y_true, y_pred = pair
    assert 0.0 <= nmi(y_true, y_pred) <= 1.0
    assert -1.0 <= ari(y_true, y_pred) <= 1.0
    assert 0.0 <= clustering_accuracy(y_true, y_pred) <= 1.0


def test_ari_independent_partitions_mean_near_zero():
    rng = derive_rng(61)
    vals = []
    for _ in range(1000):
        y_true = rng.integers(0, 4, size=50).tolist()
        y_pred = rng.integers(0, 4, size=50).tolist()
        vals.append(ari(y_true, y_pred))
    assert abs(float(np.mean(vals))) < 0.05
