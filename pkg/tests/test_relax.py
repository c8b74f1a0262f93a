import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from pevmpc.fleet import Pev
from pevmpc.grid import parse_case
from pevmpc.relax import (PevDemand, WindowError, build_window_sdr, bus_injections, charges_per_bus,
                          extract_slot, flow_residual, infeasibility_report, is_rank_one, numerical_rank,
                          project_boxes, rank_gap, recover_voltage)
from pevmpc.sdp import EQ, HermitianEmbedding, SolverOptions, solve

from conftest import base_loads, case, repair_instances, solved_slot

TIGHT = SolverOptions(gap_tol=1e-9, feas_tol=1e-9)


def two_bus(r=0.1, x=0.3):
    return parse_case(f"""
baseMVA = 100
[bus]
1 0 0 0.9 1.1
2 60 20 0.9 1.1
[gen]
1 0 200 -100 100
[branch]
1 2 {r} {x} 30
[gencost]
1 0.01 10 0
""")


def test_count_audit():
    net = two_bus()
    pev = Pev("e", 1, 1, 2, capacity=20, soc0=0.5, p_max=10, efficiency=1.0)
    loads = {t: base_loads(net) for t in (1, 2)}
    prob, model = build_window_sdr(net, (1, 2), loads, {1: 0.1, 2: 0.2}, [PevDemand(pev, 10.0)], dt=1.0)
    assert len(model.herm) == 2
    assert all(prob.block_dims[e.block] == 4 for e in model.herm.values())
    assert len(model.pg) == len(model.qg) == len(model.epigraph) == 2
    assert len(model.charge) == 2
    assert model.count("balance") == 2 * 2 * 2
    assert model.count("voltage") == 2 * 2 * 2       # two boxes per slot, two rows each
    assert model.count("angle") == 2 * 2
    assert len(model.rate_bounds) == 4
    assert model.count("completion") == 1


def test_balance_row_expansion():
    net = two_bus(0.1, 0.3)
    assert net.lines[0].y == pytest.approx(1 - 3j)
    prob, model = build_window_sdr(net, (1, 1), {1: base_loads(net)}, {1: 0.0}, dt=1.0)
    rng = np.random.default_rng(3)
    G = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    W = G @ G.conj().T
    blocks = [np.zeros((n, n)) for n in prob.block_dims]
    blocks[model.herm[1].block] = HermitianEmbedding.real_block(W)
    scalars = np.zeros(prob.n_scalars)
    scalars[model.pg[(1, 0)]] = 0.7
    values = prob.row_values(blocks, scalars)
    re_row, im_row = model.rows["balance"][0], model.rows["balance"][1]
    expect = (W[0, 0] - W[0, 1]) * (1 + 3j)
    # rows read sum(...) - P_g = -P_l
    assert values[re_row] == pytest.approx(expect.real - 0.7)
    assert values[im_row] == pytest.approx(expect.imag)


def test_no_pevs_no_completion(case9):
    _, model = build_window_sdr(case9, (1, 1), {1: base_loads(case9)}, {1: 0.1})
    assert model.count("completion") == 0
    assert model.charge == {}


def test_window_errors(case9):
    loads = {1: base_loads(case9)}
    with pytest.raises(WindowError):
        build_window_sdr(case9, (2, 1), loads, {1: 0.1})
    with pytest.raises(WindowError):
        build_window_sdr(case9, (1, 1), {1: np.zeros(3)}, {1: 0.1})
    with pytest.raises(WindowError):
        build_window_sdr(case9, (1, 2), loads, {1: 0.1})
    off_gen = Pev("x", 5, 1, 1)
    with pytest.raises(WindowError):
        build_window_sdr(case9, (1, 1), loads, {1: 0.1}, [PevDemand(off_gen, 1.0)])
    late = Pev("y", 1, 3, 4)
    with pytest.raises(WindowError):
        build_window_sdr(case9, (1, 1), loads, {1: 0.1}, [PevDemand(late, 1.0)])


def test_pev_variables_on_stay_only(case9):
    pev = Pev("a", 2, 3, 5, capacity=10, soc0=0.0, p_max=20)
    loads = {t: base_loads(case9) for t in range(2, 7)}
    prices = {t: 0.1 for t in range(2, 7)}
    _, model = build_window_sdr(case9, (2, 6), loads, prices, [PevDemand(pev, 5.0)])
    assert sorted(t for (_, t) in model.charge) == [3, 4, 5]
    _, model = build_window_sdr(case9, (4, 6), loads, prices, [PevDemand(pev, 5.0)])
    assert sorted(t for (_, t) in model.charge) == [4, 5]


def test_rank_gap_examples():
    v = np.array([1, 0.5j, -0.3])
    assert rank_gap(np.outer(v, v.conj())) == pytest.approx(0, abs=1e-12)
    assert rank_gap(np.eye(2)) == pytest.approx(1)
    with pytest.raises(ValueError):
        rank_gap(np.diag([1.0, -0.1]))


def test_numerical_rank():
    assert numerical_rank(np.diag([1.0, 1e-7, 0])) == 1
    assert numerical_rank(np.diag([1.0, 1e-3])) == 2
    assert is_rank_one(np.diag([1.0, 1e-7]))
    assert not is_rank_one(np.diag([1.0, 1e-5]))


def test_recover_examples():
    np.testing.assert_allclose(recover_voltage(np.ones((2, 2))), [1, 1])
    np.testing.assert_allclose(recover_voltage(np.array([[4.0]])), [2])
    v = np.array([1, 0.9 * np.exp(-0.1j)])
    V = recover_voltage(np.outer(v, v.conj()))
    np.testing.assert_allclose(np.abs(V), np.abs(v))
    assert np.angle(V[1]) - np.angle(V[0]) == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        recover_voltage(np.zeros((2, 2)))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 5))
def test_recover_round_trip(seed, n, ref):
    ref = ref % n
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.5, 1.5, n) * np.exp(1j * rng.uniform(-1, 1, n))
    V = recover_voltage(np.outer(v, v.conj()), ref)
    assert np.angle(V[ref]) == pytest.approx(0, abs=1e-12)
    phase = v[ref] / abs(v[ref])
    np.testing.assert_allclose(V * phase, v, atol=1e-9)


def test_flow_residual_examples(case9):
    load = base_loads(case9)
    zero = np.zeros(case9.n_bus, dtype=complex)
    ng = len(case9.generators)
    res = flow_residual(case9, zero, np.zeros(ng), np.zeros(ng), load, np.zeros(9))
    assert res == pytest.approx(np.abs(load).max())
    model, sol = solved_slot(case9, options=TIGHT)
    rec = extract_slot(model, sol, 1)
    assert rec.flow_residual <= 1e-6
    prev = rec.flow_residual
    for h in (1e-4, 1e-3, 1e-2):
        V = rec.V.copy()
        V[4] *= 1 + h
        res = flow_residual(case9, V, rec.p_gen, rec.q_gen, load, np.zeros(9))
        assert res > prev
        prev = res


def test_extract_slot_contract(case9):
    model, sol = solved_slot(case9)
    rec = extract_slot(model, sol, 1)
    assert rec.slot == 1 and rec.voltage_available
    assert np.angle(rec.V[case9.index(case9.reference_bus)]) == pytest.approx(0, abs=1e-12)
    with pytest.raises(KeyError):
        extract_slot(model, sol, 2)
    _, _, hard = repair_instances(1)[0]
    assert hard.rank_gap > 1e-4
    assert hard.V is None and hard.flow_residual is None


@pytest.mark.parametrize("name", ["case2", "case3", "case9"])
def test_solution_satisfies_rows(name):
    net = case(name)
    model, sol = solved_slot(net)
    assert sol.ok
    prob, _ = build_window_sdr(net, (1, 1), {1: base_loads(net)}, {1: 0.1})
    lhs = prob.row_values(sol.blocks, sol.scalars)
    scale = 1 + np.abs(prob.rhs)
    assert np.max(np.abs(lhs - prob.rhs) / scale) <= 1e-6
    # slacks are nonnegative, so the original inequalities hold
    assert min(sol.scalars[k] for k in prob.slack_of_row if k >= 0) >= -1e-9


def test_angle_rows_two_sided(case9):
    model, sol = solved_slot(case9)
    W = model.hermitian(sol, 1)
    for ln in case9.lines:
        k, m = case9.index(ln.from_bus), case9.index(ln.to_bus)
        assert abs(W[k, m].imag) <= math.tan(ln.theta_max) * W[k, m].real + 1e-7
        assert W[k, m].real >= -1e-9


@pytest.mark.parametrize("name", ["case2", "case3", "case9"])
def test_objective_decomposition(name):
    net = case(name)
    pev = Pev("a", net.gen_set[0], 1, 1, capacity=10, soc0=0.5, p_max=20, efficiency=0.9)
    prob, model = build_window_sdr(net, (1, 1), {1: base_loads(net)}, {1: 0.3}, [PevDemand(pev, 4.5)])
    sol = solve(prob, TIGHT)
    gen, chg, total = model.total_cost(sol)
    assert chg == pytest.approx(0.5 * 0.3 * 10.0, rel=1e-8)
    assert total == pytest.approx(gen + chg)
    assert sol.primal_objective == pytest.approx(total, rel=1e-8)


def test_infeasibility_report(case9):
    buses = [b.__class__(b.id, b.p_load * 10, b.q_load, b.v_min, b.v_max) for b in case9.buses]
    net = case9.with_buses(buses)
    prob, model = build_window_sdr(net, (1, 1), {1: base_loads(net)}, {1: 0.1})
    sol = solve(prob)
    assert sol.status == "infeasible"
    assert "gen_p" in infeasibility_report(model, sol)


def test_project_boxes(case9):
    V = np.array([1.2, 0.8, 1.0, 0, 1, 1, 1, 1, 1], dtype=complex) * np.exp(0.3j)
    gens = case9.generators
    p = np.array([g.p_max + 1 for g in gens])
    q = np.array([g.q_min - 1 for g in gens])
    V2, p2, q2 = project_boxes(case9, V, p, q)
    for b, v in zip(case9.buses, V2):
        assert b.v_min - 1e-12 <= abs(v) <= b.v_max + 1e-12
    np.testing.assert_allclose(np.angle(V2[:3]), 0.3)
    np.testing.assert_allclose(p2, [g.p_max for g in gens])
    np.testing.assert_allclose(q2, [g.q_min for g in gens])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.96, 1.04), st.floats(0.96, 1.04), st.floats(-0.3, 0.3))
def test_relaxation_property(v1, v2, theta):
    """A feasible point of the nonconvex slot problem is feasible for the relaxation at equal cost."""
    net = case("case2")
    V = np.array([v1, v2 * np.exp(1j * theta)])
    load = base_loads(net)
    S = bus_injections(net, V) + load
    gens = net.generators
    assume(all(g.p_min <= S[k].real <= g.p_max and g.q_min <= S[k].imag <= g.q_max
               for k, g in enumerate(gens)))
    prob, model = build_window_sdr(net, (1, 1), {1: load}, {1: 0.0})
    base = net.base_mva
    blocks = [np.zeros((n, n)) for n in prob.block_dims]
    blocks[model.herm[1].block] = HermitianEmbedding.real_block(np.outer(V, V.conj()))
    scalars = np.zeros(prob.n_scalars)
    for g, gen in enumerate(gens):
        p = S[net.index(gen.bus)].real
        scalars[model.pg[(1, g)]] = p
        scalars[model.qg[(1, g)]] = S[net.index(gen.bus)].imag
        c2 = gen.c2 * base * base
        blocks[model.epigraph[(1, g)]] = np.array([[c2 * p * p, math.sqrt(c2) * p], [math.sqrt(c2) * p, 1.0]])
    lhs = prob.row_values(blocks, scalars)
    for i, (sense, rhs) in enumerate(zip(prob.senses, prob.rhs)):
        if sense == EQ:
            assert lhs[i] == pytest.approx(rhs, abs=1e-9)
        else:
            assert lhs[i] <= rhs + 1e-9
    cost = model.total_cost(type("S", (), {"scalars": scalars, "blocks": blocks})())[2]
    assert prob.objective_value(blocks, scalars) == pytest.approx(cost, rel=1e-12)
    sdr = solve(prob)
    assert sdr.primal_objective <= cost + 1e-6 * cost


def test_charges_per_bus(case9):
    kappa = 1 / (1000 * case9.base_mva)
    out = charges_per_bus(case9, {"a": 10.0, "b": 5.0}, {"a": 1, "b": 1})
    assert out[case9.index(1)] == pytest.approx(15 * kappa)
    assert out.sum() == pytest.approx(15 * kappa)
