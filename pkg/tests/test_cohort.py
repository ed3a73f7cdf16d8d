import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from survrule.cohort import (
    CohortError,
    EmptyRiskSetWarning,
    Subject,
    decode_longitudinal,
    encode_longitudinal,
    expand_risk_sets,
    read_cohort,
)

from conftest import cohort_of


@st.composite
def subjects(draw, k_max=None):
    k = draw(st.integers(1, 6)) if k_max is None else k_max
    delta = draw(st.integers(0, 1))
    t = draw(st.integers(1 if delta else 0, k))
    a = draw(st.integers(0, 1))
    w = tuple(draw(st.lists(st.floats(-5, 5), min_size=1, max_size=3)))
    return Subject("x", w, a, delta, t), k


def test_encode_event_at_two():
    rec = encode_longitudinal(Subject("s", (0.0,), 1, 1, 2), 3)
    assert rec.l.tolist() == [0, 1, 0]
    assert rec.r.tolist() == [0, 0, 0]
    assert rec.i_risk.tolist() == [1, 1, 0]
    assert rec.j_risk.tolist() == [1, 1, 0]


def test_encode_censored_at_baseline():
    rec = encode_longitudinal(Subject("s", (0.0,), 0, 0, 0), 3)
    assert rec.r.tolist() == [1, 0, 0]
    assert rec.l.sum() == 0
    assert rec.i_risk.tolist() == [0, 0, 0]
    assert rec.j_risk.tolist() == [1, 0, 0]


def test_encode_administrative_censoring():
    rec = encode_longitudinal(Subject("s", (0.0,), 0, 0, 3), 3)
    assert rec.r.sum() == 0 and rec.l.sum() == 0
    assert rec.i_risk.tolist() == [1, 1, 1]
    assert rec.j_risk.tolist() == [1, 1, 1]


def test_encode_horizon_mismatch():
    with pytest.raises(CohortError):
        encode_longitudinal(Subject("s", (0.0,), 0, 1, 4), 3)


@pytest.mark.parametrize("a,delta,t", [(0, 1, 0), (2, 0, 1), (0, 3, 1), (1, 0, -1)])
def test_subject_invariants(a, delta, t):
    with pytest.raises(CohortError):
        Subject("s", (0.0,), a, delta, t).validate(3)


@given(subjects())
def test_round_trip_and_indicator_rules(sk):
    s, k = sk
    rec = encode_longitudinal(s, k)
    assert decode_longitudinal(rec) == (s.delta, s.t_tilde)
    fired = rec.r.sum() + rec.l.sum()
    assert fired == (0 if (s.delta == 0 and s.t_tilde == k) else 1)
    # monotone risk sets and I_{m+1} <= J_m
    assert np.all(np.diff(rec.i_risk) <= 0)
    assert np.all(np.diff(rec.j_risk) <= 0)
    assert np.all(rec.i_risk <= rec.j_risk)
    # definitions in terms of R and L
    for m in range(1, k + 1):
        expect = int(rec.r[:m].sum() == 0 and rec.l[: m - 1].sum() == 0)
        assert rec.i_risk[m - 1] == expect
    for m in range(k):
        expect = int(rec.r[:m].sum() == 0 and rec.l[:m].sum() == 0)
        assert rec.j_risk[m] == expect


def test_risk_sets_single_event_subject():
    ev, ce = expand_risk_sets(cohort_of([(1, 1, 2)]), 3)
    assert list(zip(ev.m.tolist(), ev.y.tolist())) == [(1, 0), (2, 1)]
    assert list(zip(ce.m.tolist(), ce.y.tolist())) == [(0, 0), (1, 0)]


def test_risk_sets_baseline_censoring():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyRiskSetWarning)
        ev, ce = expand_risk_sets(cohort_of([(0, 0, 0)]), 2)
    assert len(ev) == 0
    assert ce.m.tolist() == [0] and ce.y.tolist() == [1]


def test_risk_sets_empty_warns():
    with pytest.warns(EmptyRiskSetWarning):
        expand_risk_sets(cohort_of([(0, 0, 0)]), 2)


def test_risk_sets_three_events():
    ev, _ = expand_risk_sets(cohort_of([(1, 1, 1)] * 3), 2)
    assert len(ev) == 3 and set(ev.m.tolist()) == {1} and ev.y.tolist() == [1, 1, 1]


@given(st.lists(subjects(k_max=4), min_size=1, max_size=25), st.integers(1, 4))
def test_risk_set_counts_match_indicators(sks, tau):
    subs = [s for s, _ in sks]
    c = cohort_of([(s.a, s.delta, s.t_tilde) for s in subs], k_max=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyRiskSetWarning)
        ev, ce = expand_risk_sets(c, tau)
    recs = [encode_longitudinal(s, 4) for s in subs]
    assert len(ev) == sum(int(r.i_risk[: tau - 1].sum()) for r in recs)
    assert len(ce) == sum(int(r.j_risk[: max(tau - 1, 0)].sum()) for r in recs)
    assert ev.y.sum() == sum(int(r.l[: tau - 1].sum()) for r in recs)
    assert ce.y.sum() == sum(int(r.r[: max(tau - 1, 0)].sum()) for r in recs)


def test_tau_out_of_range():
    with pytest.raises(CohortError):
        expand_risk_sets(cohort_of([(1, 1, 1)]), 4)


def _write(tmp_path, text):
    p = tmp_path / "c.csv"
    p.write_text(text)
    return p


GOOD = "id,arm,event,time,age,x\n1,0,1,2,50,0.1\n2,1,0,3,61,0.2\n3,1,1,1,45,-1\n4,0,0,0,70,2.5\n"


def test_read_well_formed(tmp_path):
    c = read_cohort(_write(tmp_path, GOOD), k_max=3)
    assert len(c) == 4 and c.p == 2
    assert c.covariate_names == ("age", "x")
    assert c.time.tolist() == [2, 3, 1, 0]


def test_read_bad_arm_cites_row(tmp_path):
    text = GOOD.replace("3,1,1,1,45", "3,2,1,1,45")
    with pytest.raises(CohortError) as exc:
        read_cohort(_write(tmp_path, text), k_max=3)
    assert exc.value.row == 3
    assert "row 3" in str(exc.value)


def test_read_empty_covariate_names_column(tmp_path):
    text = GOOD.replace("2,1,0,3,61,0.2", "2,1,0,3,,0.2")
    with pytest.raises(CohortError) as exc:
        read_cohort(_write(tmp_path, text), k_max=3)
    assert exc.value.column == "age" and "age" in str(exc.value)


@pytest.mark.parametrize(
    "text,needle",
    [
        ("id,arm,time,x\n1,0,1,0\n", "missing columns"),
        ("id,arm,event,time,x\n1,0,1,5,0\n", "time"),
        ("id,arm,event,time,x\n1,0,1,1,abc\n", "non-numeric"),
        ("id,arm,event,time,x\n1,0,7,1,0\n", "event"),
        ("id,arm,event,time,x\n1,0,1,1,0\n1,1,1,1,0\n", "duplicate"),
    ],
)
def test_read_errors(tmp_path, text, needle):
    with pytest.raises(CohortError, match=needle):
        read_cohort(_write(tmp_path, text), k_max=3)


def test_read_schema_and_ceiling(tmp_path):
    p = _write(tmp_path, "pid,trt,dead,months,z,junk\na,1,1,1.2,0.5,9\nb,0,0,2,0.1,9\n")
    schema = {"id": "pid", "arm": "trt", "event": "dead", "time": "months", "covariates": ["z"]}
    c = read_cohort(p, schema, k_max=3, discretize="ceil")
    assert c.time.tolist() == [2, 2] and c.covariate_names == ("z",)
    with pytest.raises(CohortError):
        read_cohort(p, schema, k_max=3)


def test_cohort_is_immutable_and_take_selects(tmp_path):
    c = read_cohort(_write(tmp_path, GOOD), k_max=3)
    with pytest.raises(ValueError):
        c.a[0] = 1
    sub = c.take([3, 1])
    assert sub.ids.tolist() == ["4", "2"]
    assert sub.select_covariates(["x"]).ravel().tolist() == [2.5, 0.2]
    with pytest.raises(CohortError):
        c.select_covariates(["nope"])


def test_csv_round_trip(tmp_path):
    c = cohort_of([(1, 1, 2), (0, 0, 3), (1, 0, 0)], w=np.array([[0.1], [1 / 3], [-2.0]]))
    c.to_csv(tmp_path / "out.csv")
    back = read_cohort(tmp_path / "out.csv", k_max=3)
    assert back.ids.tolist() == c.ids.tolist()
    assert np.array_equal(back.w, c.w)
    assert np.array_equal(back.time, c.time) and np.array_equal(back.delta, c.delta)
