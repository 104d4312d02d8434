import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flashjm.concordance import c_index_uno, kaplan_meier
from flashjm.data import ValidationError
from oracles import km_reference, uno_reference


def test_km_trivial():
    km = kaplan_meier([1.0, 2.0], [0, 0])
    assert km(5.0) == 1.0 and km(0.0) == 1.0
    km = kaplan_meier([1.0], [1])
    assert km(0.999) == 1.0 and km(1.0) == 0.0 and km.left(1.0) == 1.0


def test_km_hand_instance():
    # events at 1 and 3, censoring at 2 and 4: S(1)=3/4, S(3)=3/4*(1-1/2)=3/8
    km = kaplan_meier([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0])
    assert km(1.0) == 0.75
    assert km(2.5) == 0.75
    assert km(3.0) == 0.375
    assert km(10.0) == 0.375
    assert km.left(3.0) == 0.75


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 8), st.booleans()), min_size=1, max_size=12),
       st.floats(0, 10))
def test_km_matches_reference(rows, t):
    T = np.array([float(a) for a, _ in rows])
    E = np.array([int(b) for _, b in rows])
    km = kaplan_meier(T, E)
    assert km(t) == pytest.approx(km_reference(T, E, t), abs=1e-14)
    assert km.left(t) == pytest.approx(km_reference(T, E, t, left=True), abs=1e-14)


def test_perfect_and_constant():
    T = np.array([3.0, 1.0, 4.0, 2.0, 5.0])
    D = np.ones(5, dtype=bool)
    assert c_index_uno(-T, T, D) == 1.0
    assert c_index_uno(np.full(5, 0.3), T, D) == 0.5


def test_five_subject_censored_instance():
    T = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    D = np.array([1, 0, 1, 1, 0], dtype=bool)
    r = np.array([0.9, 0.4, 0.5, 0.5, 0.1])
    expected = uno_reference(r, T, D.astype(int), np.inf)
    assert c_index_uno(r, T, D) == expected
    # hand value: weight 1 for i=1 (4 pairs, all concordant); G(3-)=G(4-)=3/4, weight 16/9
    # i=3: pairs (4, 5) give 0.5 + 1; i=4: pair 5 gives 1
    w = 16.0 / 9.0
    hand = (4 + w * 1.5 + w * 1) / (4 + w * 2 + w * 1)
    assert expected == pytest.approx(hand, abs=1e-15)
    assert c_index_uno(r, T, D, 3.5) == uno_reference(r, T, D.astype(int), 3.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 15), st.integers(0, 2 ** 32 - 1))
def test_random_instances_match_pair_loop(n, seed):
    rng = np.random.default_rng(seed)
    T = rng.integers(1, 6, n).astype(float)
    D = rng.random(n) < 0.6
    r = rng.integers(0, 3, n).astype(float)
    try:
        expected = uno_reference(r, T, D.astype(int), 4.5)
    except ZeroDivisionError:
        with pytest.raises(ValidationError):
            c_index_uno(r, T, D, 4.5)
        return
    assert c_index_uno(r, T, D, 4.5) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2 ** 32 - 1))
def test_sign_flip_complements(n, seed):
    rng = np.random.default_rng(seed)
    T = rng.permutation(n).astype(float) + 1.0
    r = rng.standard_normal(n)
    D = np.ones(n, dtype=bool)
    assert c_index_uno(r, T, D) + c_index_uno(-r, T, D) == pytest.approx(1.0, abs=1e-12)


def test_no_comparable_pairs():
    with pytest.raises(ValidationError):
        c_index_uno([1.0, 2.0], [1.0, 2.0], [0, 0])
