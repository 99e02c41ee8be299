import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dame.metrics import (ami, ari, cluster_scores, contingency, expected_mutual_info, inertia,
                          kmeans, nmi)

from oracles import ari_pairs, emi_enumerate

labelings = st.lists(st.integers(0, 3), min_size=2, max_size=12)


# -- k-means ---------------------------------------------------------------------

def test_kmeans_separates_far_clouds():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.01, (20, 3)), rng.normal(100, 0.01, (20, 3))])
    labels = kmeans(X, 2, seed=0)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1
    assert labels[0] != labels[-1]


def test_kmeans_k_equals_n():
    X = np.random.default_rng(1).standard_normal((7, 2))
    labels = kmeans(X, 7, seed=0)
    assert len(set(labels)) == 7 and inertia(X, labels) == pytest.approx(0.0)


def test_kmeans_beats_truth_inertia():
    rng = np.random.default_rng(2)
    centers = rng.normal(0, 3, (4, 2))
    truth = np.repeat(np.arange(4), 25)
    X = centers[truth] + rng.standard_normal((100, 2))
    assert inertia(X, kmeans(X, 4, seed=0)) <= inertia(X, truth) + 1e-9


def test_kmeans_deterministic_and_validates():
    X = np.random.default_rng(3).standard_normal((30, 2))
    assert np.array_equal(kmeans(X, 3, seed=5), kmeans(X, 3, seed=5))
    with pytest.raises(ValueError):
        kmeans(X[:2], 3)


def test_kmeans_duplicate_points():
    X = np.zeros((6, 2))
    X[3:] = 1.0
    labels = kmeans(X, 3, seed=0)
    assert labels.shape == (6,)


# -- NMI ------------------------------------------------------------------------

def test_nmi_examples():
    assert nmi([0, 0, 1, 1, 2], [5, 5, 7, 7, 9]) == pytest.approx(1.0)
    assert nmi([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert nmi([3, 3, 3], [1, 1, 1]) == 1.0


def test_length_mismatch():
    for f in (nmi, ami, ari):
        with pytest.raises(ValueError):
            f([0, 1], [0, 1, 1])


def test_nmi_matches_hand_value():
    # MI of [0,0,1,1] vs [0,0,0,1]: computed from the 2x2 table [[2,0],[1,1]]
    p = np.array([[2, 0], [1, 1]]) / 4
    pu, pv = p.sum(1), p.sum(0)
    mi = sum(p[i, j] * np.log(p[i, j] / (pu[i] * pv[j])) for i in range(2) for j in range(2)
             if p[i, j] > 0)
    h = lambda q: -np.sum(q * np.log(q))  # noqa: E731
    assert nmi([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(mi / np.sqrt(h(pu) * h(pv)))


# -- AMI ------------------------------------------------------------------------

def test_ami_identical_is_one():
    assert ami([0, 0, 1, 1, 2, 2], [1, 1, 0, 0, 2, 2]) == pytest.approx(1.0)


def test_emi_two_by_two_enumeration():
    table = np.array([[1, 1], [1, 1]])
    assert expected_mutual_info(table) == pytest.approx(emi_enumerate(table), abs=1e-12)


@pytest.mark.parametrize("table", [[[2, 1], [0, 3]], [[4, 0], [1, 2]], [[1, 2], [3, 1]]])
def test_emi_matches_enumeration_more_tables(table):
    assert expected_mutual_info(np.array(table)) == pytest.approx(
        emi_enumerate(table), abs=1e-12)


def test_ami_random_labelings_near_zero():
    rng = np.random.default_rng(0)
    vals = [ami(rng.integers(0, 5, 200), rng.integers(0, 5, 200)) for _ in range(100)]
    assert abs(np.mean(vals)) < 0.05


# -- ARI ------------------------------------------------------------------------

def test_ari_examples():
    assert ari([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert ari([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(0.0)


@settings(max_examples=60, deadline=None)
@given(labelings, st.data())
def test_ari_matches_pair_enumeration(a, data):
    b = data.draw(st.lists(st.integers(0, 3), min_size=len(a), max_size=len(a)))
    assert ari(a, b) == pytest.approx(ari_pairs(a, b), abs=1e-12)


# -- shared properties ---------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(labelings, st.data())
def test_symmetry_bounds_and_relabel_invariance(a, data):
    b = data.draw(st.lists(st.integers(0, 3), min_size=len(a), max_size=len(a)))
    perm = {0: 3, 1: 2, 2: 0, 3: 1}
    a2 = [perm[x] for x in a]
    for f in (nmi, ami, ari):
        assert f(a, b) == pytest.approx(f(b, a), abs=1e-10)
        assert f(a2, b) == pytest.approx(f(a, b), abs=1e-10)
        assert f(a, b) <= 1.0 + 1e-12
    assert 0.0 <= nmi(a, b) <= 1.0


def test_contingency_counts():
    t = contingency([0, 0, 1, 2], ["a", "b", "b", "b"])
    assert t.tolist() == [[1, 1], [0, 1], [0, 1]]


def test_cluster_scores_perfect():
    X = np.repeat(np.eye(3) * 10, 5, axis=0)
    scores = cluster_scores(X, np.repeat([4, 5, 6], 5), seed=0)
    assert scores == {"nmi": 1.0, "ami": pytest.approx(1.0), "ari": 1.0}
    with pytest.raises(ValueError):
        cluster_scores(X, np.zeros(15), seed=0)
