
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pevmpc.fleet import Pev, initial_demand
from pevmpc.grid import Profile, parse_case
from pevmpc.mpc import MpcConfig, MpcError, delivered_from_records, run, total_cost
from pevmpc.relax import generation_cost
from pevmpc.scenario import Scenario, load_scenario
from pevmpc.sdp import SolverOptions

from conftest import case, data_path


def flat_two_bus(pmax_mw=200.0, c1=0.01):
    return parse_case(f"""
baseMVA = 100
[bus]
1 0 0 0.9 1.1
2 60 20 0.9 1.1
[gen]
1 0 {pmax_mw} -100 100
[branch]
1 2 0.01 0.1 30
[gencost]
1 0 {c1} 0
""")


def scenario(net, pevs, T, price, dt=1.0, load=None):
    return Scenario(net, tuple(pevs), Profile(load or (1.0,) * T), Profile(price), T=T, dt=dt, seed=0)


def test_two_slot_toy():
    pev = Pev("a", 1, 1, 2, capacity=10, soc0=0.0, p_max=8, efficiency=1.0)
    res = run(scenario(flat_two_bus(), [pev], 2, (2.0, 1.0)))
    assert [r.charges["a"] for r in res.records] == pytest.approx([2.0, 8.0], abs=1e-6)
    assert res.delivered["a"] == pytest.approx(10.0, rel=1e-6)


def test_no_pevs_is_plain_opf(case3):
    res = run(scenario(case3, [], 3, (0.1, 0.2, 0.3), dt=0.5))
    assert len(res.records) == 3
    for r in res.records:
        assert r.charges == {} and r.window_end == r.slot and r.charge_cost == 0
    gen = sum(generation_cost(case3, r.p_gen, 0.5) for r in res.records)
    assert res.total == pytest.approx(gen)


def test_completion_at_departure():
    pev = Pev("a", 1, 1, 1, capacity=10, soc0=0.5, p_max=20, efficiency=0.9)
    res = run(scenario(flat_two_bus(), [pev], 1, (0.3,), dt=0.5))
    assert 0.9 * res.records[0].charges["a"] * 0.5 == pytest.approx(5.0, rel=1e-9)


def test_single_pev_delivered(case9):
    pev = Pev("a", 2, 2, 6, capacity=40, soc0=0.3, p_max=20, efficiency=0.9)
    res = run(scenario(case9, [pev], 6, (0.2, 0.1, 0.3, 0.05, 0.2, 0.1), dt=0.5))
    assert res.delivered["a"] == pytest.approx(initial_demand(pev), rel=1e-6)
    assert delivered_from_records(res, 0.5)["a"] == pytest.approx(initial_demand(pev), rel=1e-6)
    assert res.records[0].charges == {}


def test_total_cost_recomputed():
    sc = load_scenario(data_path("case3_scenario.ini"))
    res = run(sc)
    gen, chg, tot = total_cost(res, sc)
    assert gen == pytest.approx(res.gen_cost, rel=1e-8)
    assert chg == pytest.approx(res.charge_cost, rel=1e-8)
    assert tot == pytest.approx(sum(r.total_cost for r in res.records), rel=1e-8)
    assert [p for p, *_ in res.rejected] == ["b2"]


def test_flat_price_charging_term():
    pevs = [Pev("a", 1, 1, 3, capacity=10, soc0=0.0, p_max=8, efficiency=1.0),
            Pev("b", 1, 2, 3, capacity=6, soc0=0.0, p_max=8, efficiency=1.0)]
    res = run(scenario(flat_two_bus(), pevs, 3, (0.5, 0.5, 0.5)))
    energy = sum(sum(r.charges.values()) for r in res.records)
    assert res.charge_cost == pytest.approx(0.5 * energy, rel=1e-9)
    assert energy == pytest.approx(16.0, rel=1e-6)


def staggered(net, n=5, T=5):
    stations = net.gen_set
    return [Pev(f"p{i}", stations[i % len(stations)], 1 + i % T, T, capacity=20, soc0=0.3, p_max=20)
            for i in range(n)]


def test_causality(case3):
    pevs = staggered(case3)
    price = (0.3, 0.1, 0.2, 0.05, 0.15)
    full = run(scenario(case3, pevs, 5, price, dt=0.5))
    for k in range(1, 5):
        cut = run(scenario(case3, [p for p in pevs if p.arrival <= k], 5, price, dt=0.5))
        for a, b in zip(full.records[:k], cut.records[:k]):
            assert a.charges == b.charges
            np.testing.assert_array_equal(a.p_gen, b.p_gen)
            np.testing.assert_array_equal(a.voltages, b.voltages)


def test_eviction_when_oversubscribed():
    net = flat_two_bus(pmax_mw=61.5)
    pevs = [Pev(f"big{i}", 1, 1, 1, capacity=1000, soc0=0.0, p_max=1000, efficiency=1.0) for i in range(3)]
    res = run(scenario(net, pevs, 1, (0.1,)))
    assert res.evicted
    evicted = {e[0] for e in res.evicted}
    for pid, kwh in res.delivered.items():
        assert pid not in evicted
        assert kwh == pytest.approx(1000.0, rel=1e-6)


def test_partial_result_on_solver_failure(case3):
    sc = scenario(case3, staggered(case3), 5, (0.1,) * 5, dt=0.5)
    with pytest.raises(MpcError) as err:
        run(sc, MpcConfig(solver=SolverOptions(max_iter=1)))
    assert err.value.partial is not None and err.value.partial.records == []


def check_committed(sc, res, eps=1e-4):
    net = sc.network
    for r in res.records:
        mag = np.abs(r.voltages)
        for b, m in zip(net.buses, mag):
            assert b.v_min - 1e-6 <= m <= b.v_max + 1e-6
        for g, p, q in zip(net.generators, r.p_gen, r.q_gen):
            assert g.p_min - 1e-6 <= p <= g.p_max + 1e-6
            assert g.q_min - 1e-6 <= q <= g.q_max + 1e-6
        for pid, kw in r.charges.items():
            assert -1e-9 <= kw <= res.admitted[pid].p_max + 1e-6
        if r.rank_gap <= eps:
            assert r.flow_residual <= 1e-3
        assert r.gen_cost >= 0 and r.charge_cost >= 0


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 4))
def test_online_invariants(seed, n, T):
    rng = np.random.default_rng(seed)
    net = case("case3")
    pevs = []
    for i in range(n):
        a = int(rng.integers(1, T + 1))
        d = int(rng.integers(a, T + 1))
        pevs.append(Pev(f"p{i}", int(rng.choice(net.gen_set)), a, d, capacity=float(rng.uniform(5, 30)),
                        soc0=float(rng.uniform(0, 0.9)), p_max=20, efficiency=0.9))
    sc = Scenario(net, tuple(pevs), Profile(tuple(rng.uniform(0.5, 1.2, T))),
                  Profile(tuple(rng.uniform(0.05, 0.3, T))), T=T, dt=0.5, seed=seed)
    res = run(sc)
    check_committed(sc, res)
    for pid, p in res.admitted.items():
        assert res.delivered[pid] == pytest.approx(initial_demand(p), rel=1e-6)
    rejected = {r[0] for r in res.rejected}
    assert rejected | set(res.admitted) == {p.id for p in pevs}
