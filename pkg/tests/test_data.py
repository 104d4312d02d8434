import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flashjm.data import (Cohort, ColumnSpec, MarkerSeries, ModelParams, SubjectRecord,
                          ValidationError, build_designs, cohort_from_dict, cohort_to_dict,
                          load_cohort, write_cohort)


def _write(tmp_path, subjects, longitudinal):
    (tmp_path / "s.csv").write_text(subjects)
    (tmp_path / "l.csv").write_text(longitudinal)
    return tmp_path / "s.csv", tmp_path / "l.csv"


def test_failure_times_are_unique_uncensored_times(tmp_path):
    s, l = _write(tmp_path, "id,x1,T,delta\na,0.1,1.0,1\nb,0.2,2.0,0\n",
                  "id,marker,time,value\na,m,0.5,1.0\nb,m,1.5,2.0\n")
    c = load_cohort(s, l, ColumnSpec(markers=("m",)))
    assert c.failure_times.tolist() == [1.0]
    assert c.feature_names == ("x1",)
    assert c.subjects[1].markers[0].values.tolist() == [2.0]


def test_subject_without_rows_gets_empty_series(tmp_path):
    s, l = _write(tmp_path, "id,T,delta\na,1.0,1\nb,2.0,0\n",
                  "id,marker,time,value\na,m1,0.5,1.0\n")
    c = load_cohort(s, l, ColumnSpec(markers=("m1", "m2")))
    assert [len(m) for m in c.subjects[1].markers] == [0, 0]
    assert len(c.subjects[0].markers[1]) == 0


@pytest.mark.parametrize("subjects,longitudinal,match", [
    ("id,T,delta\na,2.0,1\n", "id,marker,time,value\na,m,3.0,1.0\n", "> T"),
    ("id,T,delta\na,2.0,1\na,1.0,0\n", "id,marker,time,value\n", "duplicate subject"),
    ("id,T,delta\na,2.0,2\n", "id,marker,time,value\n", "delta"),
    ("id,T,delta\na,-1.0,1\n", "id,marker,time,value\n", "T < 0"),
    ("id,T,delta\na,1.0,1\n", "id,marker,time,value\nz,m,0.1,1.0\n", "unknown subject"),
    ("id,T,delta\na,1.0,1\n", "id,marker,time,value\na,q,0.1,1.0\n", "not in manifest"),
    ("id,T,delta\na,1.0,1\n", "id,marker,time,value\na,m,0.1,1.0\na,m,0.1,2.0\n", "duplicate"),
    ("id,x,T,delta\na,,1.0,1\n", "id,marker,time,value\n", "cannot parse"),
    ("id,x,T,delta\na,nan,1.0,1\n", "id,marker,time,value\n", "non-finite"),
    ("id,T\na,1.0\n", "id,marker,time,value\n", "lacks column"),
])
def test_load_errors(tmp_path, subjects, longitudinal, match):
    s, l = _write(tmp_path, subjects, longitudinal)
    with pytest.raises(ValidationError, match=match):
        load_cohort(s, l, ColumnSpec(markers=("m",)))


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="missing file"):
        load_cohort(tmp_path / "nope.csv", tmp_path / "l.csv", ColumnSpec(markers=("m",)))


def test_series_validation():
    with pytest.raises(ValidationError):
        MarkerSeries([1.0, 0.5], [0.0, 0.0])
    with pytest.raises(ValidationError):
        MarkerSeries([-1.0], [0.0])
    with pytest.raises(ValidationError):
        MarkerSeries([1.0], [np.inf])
    with pytest.raises(ValidationError):
        SubjectRecord("a", [0.0], (MarkerSeries([3.0], [1.0]),), 2.0, True)


def test_designs_linear():
    sub = SubjectRecord("a", [], (MarkerSeries([0.0, 2.0], [1.0, 2.0]),), 3.0, False)
    d = build_designs(sub, 1)
    assert d.U.tolist() == [[1.0, 0.0], [1.0, 2.0]]
    np.testing.assert_array_equal(d.U, d.V)


def test_designs_empty_block_and_quadratic():
    sub = SubjectRecord("a", [], (MarkerSeries.empty(), MarkerSeries([3.0], [0.5])), 3.0, False)
    d = build_designs(sub, 2)
    assert d.U_blocks[0].shape == (0, 3)
    assert d.U_blocks[1].tolist() == [[1.0, 3.0, 9.0]]
    assert d.U.shape == (1, 6) and d.V.shape == (1, 4)
    assert d.U[0].tolist() == [0, 0, 0, 1, 3, 9]
    assert d.V[0].tolist() == [0, 0, 1, 3]
    d2 = build_designs(sub, 2)
    np.testing.assert_array_equal(d.U, d2.U)
    np.testing.assert_array_equal(d.V, d2.V)


def test_designs_reject_alpha_zero():
    sub = SubjectRecord("a", [], (MarkerSeries.empty(),), 1.0, False)
    with pytest.raises(ValidationError):
        build_designs(sub, 0)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def cohorts(draw):
    n = draw(st.integers(1, 5))
    L = draw(st.integers(1, 3))
    p = draw(st.integers(0, 3))
    subjects = []
    for i in range(n):
        T = draw(st.floats(0.1, 100.0))
        series = []
        for _ in range(L):
            times = sorted(set(draw(st.lists(st.floats(0.0, T), max_size=4))))
            vals = [draw(finite) for _ in times]
            series.append(MarkerSeries(times, vals))
        x = [draw(finite) for _ in range(p)]
        subjects.append(SubjectRecord(f"s{i}", x, tuple(series), T, draw(st.booleans())))
    return Cohort(tuple(subjects), tuple(f"m{l}" for l in range(L)),
                  tuple(f"x{j}" for j in range(p)))


def _same(a: Cohort, b: Cohort):
    assert a.marker_names == b.marker_names and a.feature_names == b.feature_names
    for s, t in zip(a.subjects, b.subjects):
        assert s.id == t.id and s.event_time == t.event_time
        assert s.event_indicator == t.event_indicator
        np.testing.assert_array_equal(s.x, t.x)
        for m, q in zip(s.markers, t.markers):
            np.testing.assert_array_equal(m.times, q.times)
            np.testing.assert_array_equal(m.values, q.values)


@settings(max_examples=40, deadline=None)
@given(cohorts())
def test_cohort_dict_round_trip(c):
    _same(c, cohort_from_dict(cohort_to_dict(c)))


@settings(max_examples=25, deadline=None)
@given(cohorts())
def test_cohort_csv_round_trip(tmp_path_factory, c):
    d = tmp_path_factory.mktemp("rt")
    write_cohort(c, d / "s.csv", d / "l.csv")
    back = load_cohort(d / "s.csv", d / "l.csv",
                       ColumnSpec(markers=c.marker_names, features=c.feature_names))
    _same(c, back)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 4), st.integers(1, 5),
       st.integers(0, 2 ** 32 - 1))
def test_params_round_trip(K, L, p, J, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((2 * L, 2 * L))
    par = ModelParams(rng.standard_normal((K, p)), rng.standard_normal((K, 2 * L)),
                      rng.random(L) + 0.1, A @ A.T, rng.random(J), rng.standard_normal((K, 3 * L)))
    back = ModelParams.from_json(par.to_json())
    for f in ("xi", "beta", "phi", "D", "lambda0", "gamma"):
        np.testing.assert_array_equal(getattr(par, f), getattr(back, f))


def test_params_validate():
    par = ModelParams(np.zeros((2, 1)), np.zeros((2, 2)), [1.0], np.eye(2), [0.5], np.zeros((2, 1)))
    par.validate()
    bad = par.copy()
    bad.phi[:] = 0.0
    with pytest.raises(ValidationError):
        bad.validate()
    bad = par.copy()
    bad.D = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        bad.validate()
