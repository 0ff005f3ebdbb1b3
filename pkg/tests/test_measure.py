import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from degenmfg.errors import DimensionError, UnsupportedCoupling
from degenmfg.measure import (ParticleMeasure, derangement, independent_copy, moment,
                              second_moment, w2_distance)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def cloud(max_size=32):
    return arrays(np.float64, st.tuples(st.integers(1, max_size), st.just(1)), elements=finite)


def brute_force_w2(a, b):
    best = min(np.mean((a - b[list(p)]) ** 2) for p in itertools.permutations(range(len(b))))
    return np.sqrt(best)


def test_single_atom_translation():
    assert w2_distance(ParticleMeasure([[0.0]]), ParticleMeasure([[1.0]])) == 1.0


def test_sorted_coupling_beats_crossed():
    assert w2_distance(ParticleMeasure([[0.0], [2.0]]), ParticleMeasure([[1.0], [3.0]])) == \
        pytest.approx(1.0, abs=1e-15)


def test_distance_to_self_is_zero(rng):
    m = ParticleMeasure(rng.normal(size=(17, 1)))
    assert w2_distance(m, m) == 0.0


@pytest.mark.parametrize("a", [-2.5, 0.0, 3.0])
def test_distance_to_origin(a):
    assert w2_distance(ParticleMeasure([[a]]), ParticleMeasure.dirac([0.0])) == abs(a)


def test_unequal_sizes_in_1d():
    # {0, 1} vs {0.5}: every atom moves by 0.5
    assert w2_distance(ParticleMeasure([[0.0], [1.0]]), ParticleMeasure([[0.5]])) == \
        pytest.approx(0.5)
    # quantile coupling on the common refinement of {0,1,2} and {0,3}
    d = w2_distance(ParticleMeasure([[0.0], [1.0], [2.0]]), ParticleMeasure([[0.0], [3.0]]))
    # pieces of mass 1/3, 1/6, 1/6, 1/3 with gaps 0, 1, 2, 1
    assert d == pytest.approx(np.sqrt(1 / 6 + 4 / 6 + 1 / 3))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        w2_distance(ParticleMeasure([[0.0]]), ParticleMeasure([[0.0, 1.0]]))


def test_unequal_sizes_in_2d_rejected():
    with pytest.raises(UnsupportedCoupling):
        w2_distance(ParticleMeasure(np.zeros((3, 2))), ParticleMeasure(np.zeros((2, 2))))


def test_assignment_in_2d_matches_brute_force(rng):
    for _ in range(10):
        a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        best = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1))
                   for p in itertools.permutations(range(5)))
        assert w2_distance(ParticleMeasure(a), ParticleMeasure(b)) == pytest.approx(np.sqrt(best))


def test_moments():
    sym = ParticleMeasure([[-1.0], [1.0]])
    assert moment(sym, 1) == pytest.approx([0.0])
    np.testing.assert_allclose(moment(sym, 2), [[1.0]])
    assert moment(ParticleMeasure([[0.0], [1.0], [2.0]]), 1) == pytest.approx([1.0])
    m = ParticleMeasure([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_allclose(moment(m, 2), [[5.0, 1.0], [1.0, 2.0]])
    assert second_moment(m) == pytest.approx(7.0)
    with pytest.raises(ValueError):
        moment(m, 3)


def test_invalid_points():
    with pytest.raises(ValueError):
        ParticleMeasure([[np.nan]])
    with pytest.raises(DimensionError):
        ParticleMeasure(np.zeros((0, 1)))
    m = ParticleMeasure([[1.0]])
    with pytest.raises(ValueError):
        m.points[0, 0] = 2.0


def test_csv_round_trip(tmp_path, rng):
    m = ParticleMeasure(rng.normal(size=(9, 3)))
    m.to_csv(tmp_path / "m.csv")
    back = ParticleMeasure.from_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.points, m.points)


def test_unique_atoms():
    atoms, w = ParticleMeasure([[1.0], [0.0], [1.0], [1.0]]).unique_atoms()
    np.testing.assert_array_equal(atoms, [[0.0], [1.0]])
    np.testing.assert_allclose(w, [0.25, 0.75])


def test_independent_copy_preserves_law(rng):
    m = ParticleMeasure([[0.0], [1.0]])
    c = independent_copy(m, rng)
    assert sorted(c.points[:, 0]) == [0.0, 1.0]
    big = ParticleMeasure(rng.normal(size=(50, 2)))
    assert w2_distance(big, independent_copy(big, rng)) == pytest.approx(0.0, abs=1e-12)


def test_independent_copy_pairing_statistics(rng):
    m = ParticleMeasure([[0.0], [1.0], [2.0], [5.0]])
    x = m.points[:, 0]
    prods = [np.mean(x * independent_copy(m, rng).points[:, 0]) for _ in range(10_000)]
    # standard error of the average is about 0.03
    assert np.mean(prods) == pytest.approx(x.mean() ** 2, abs=0.1)


def test_derangement_has_no_fixed_points(rng):
    for size in (2, 3, 10, 101):
        perm = derangement(size, rng)
        assert sorted(perm) == list(range(size))
        assert not np.any(perm == np.arange(size))


@settings(max_examples=200, deadline=None)
@given(cloud(), cloud(), cloud())
def test_metric_axioms(a, b, c):
    A, B, C = ParticleMeasure(a), ParticleMeasure(b), ParticleMeasure(c)
    ab, bc, ac = w2_distance(A, B), w2_distance(B, C), w2_distance(A, C)
    assert ab == w2_distance(B, A)
    assert ac <= ab + bc + 1e-12
    assert w2_distance(A, A) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n,), elements=finite), arrays(np.float64, (n,), elements=finite))))
def test_sorted_coupling_is_optimal(pair):
    a, b = pair
    assert w2_distance(ParticleMeasure(a), ParticleMeasure(b)) == \
        pytest.approx(brute_force_w2(a, b), rel=1e-10, abs=1e-12)
