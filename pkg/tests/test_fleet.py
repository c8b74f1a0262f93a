import pytest
from hypothesis import given, strategies as st

from pevmpc.fleet import (FleetState, OverchargeError, Pev, active_set, apply_charge, check_admissible, horizon,
                          initial_demand, parse_roster, write_roster)


def pev(id="a", arrival=1, departure=10, **kw):
    return Pev(id, 1, arrival, departure, **kw)


def test_initial_demand():
    assert initial_demand(pev(capacity=100, soc0=0.2)) == pytest.approx(80)
    assert initial_demand(pev(soc0=1.0)) == 0
    assert initial_demand(pev(capacity=50, soc0=0.5)) == pytest.approx(25)


def test_active_set_examples():
    s = FleetState()
    assert active_set(s, 1) == []
    p = pev(arrival=3, departure=10)
    s = s.admit(p)
    assert active_set(s, 5) == [p]
    assert active_set(s, 2) == []
    s = FleetState(s.pevs, {"a": 0.0})
    assert active_set(s, 5) == []


def test_horizon_examples():
    s = FleetState().admit(pev("a", 1, 5)).admit(pev("b", 1, 9))
    assert horizon(s, 3) == 9
    assert horizon(FleetState(), 7) == 7
    s = FleetState().admit(pev("a", 1, 4))
    assert horizon(s, 4) == 4


def test_apply_charge_examples():
    p = pev(efficiency=0.9)
    s = FleetState().admit(p)
    assert apply_charge(s, p, 0, 0.5) is s
    assert apply_charge(s, p, 10, 0.5).remaining["a"] == pytest.approx(75.5)
    s = FleetState(s.pevs, {"a": 4.5})
    assert apply_charge(s, p, 10, 0.5).remaining["a"] == 0.0


def test_apply_charge_errors():
    p = pev(efficiency=0.9)
    s = FleetState(FleetState().admit(p).pevs, {"a": 1.0})
    with pytest.raises(OverchargeError):
        apply_charge(s, p, 10, 0.5)
    with pytest.raises(ValueError):
        apply_charge(s, p, -1, 0.5)


def test_check_admissible_examples():
    assert check_admissible(pev(arrival=1, departure=9, p_max=20, efficiency=0.9), 0.5)
    assert not check_admissible(pev(arrival=1, departure=8, p_max=20, efficiency=0.9), 0.5)
    assert check_admissible(pev(soc0=1.0, p_max=0), 0.5)


@pytest.mark.parametrize("kw", [dict(arrival=0), dict(arrival=5, departure=4), dict(capacity=0),
                                dict(soc0=1.5), dict(efficiency=0), dict(max_stay=2)])
def test_invalid_pev(kw):
    with pytest.raises(ValueError):
        pev(**kw)


def test_roster_round_trip():
    pevs = [Pev("x1", 2, 3, 7, 60.0, 0.3, 11.0, 0.95), Pev("x2", 3, 1, 2)]
    assert parse_roster(write_roster(pevs)) == pevs
    with pytest.raises(ValueError):
        parse_roster(write_roster(pevs + [pevs[0]]))


@given(st.floats(1, 200), st.floats(0, 1), st.floats(0.5, 1), st.floats(1, 50),
       st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_charging_never_below_zero(capacity, soc0, uh, pmax, fractions):
    p = pev(capacity=capacity, soc0=soc0, efficiency=uh, p_max=pmax)
    s = FleetState().admit(p)
    for f in fractions:
        cap = min(pmax, s.remaining["a"] / (uh * 0.5))
        s = apply_charge(s, p, f * cap, 0.5)
        assert s.remaining["a"] >= -1e-9


@given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 20), st.floats(0, 50)), max_size=8),
       st.integers(1, 40))
def test_horizon_bounds(specs, t):
    s = FleetState()
    for n, (a, stay, demand) in enumerate(specs):
        p = pev(f"p{n}", a, a + stay)
        s = s.admit(p)
        s = FleetState(s.pevs, {**s.remaining, p.id: demand})
    h = horizon(s, t)
    assert h >= t
    if h > t:
        assert any(p.departure == h and p.departure > t for p in active_set(s, t))
