import dataclasses
from pathlib import Path

import numpy as np
import pytest

from pevmpc.fleet import Pev
from pevmpc.grid import Profile, load_case
from pevmpc.relax import build_window_sdr, extract_slot
from pevmpc.scenario import Scenario, bundled_scenario_path
from pevmpc.sdp import solve

DATA = Path(bundled_scenario_path()).parent


def data_path(name: str) -> Path:
    return DATA / name


def case(name: str):
    return load_case(DATA / f"{name}.txt")


def base_loads(net) -> np.ndarray:
    return np.array([b.p_load + 1j * b.q_load for b in net.buses])


def perturbed_case9(seed: int):
    """9-bus network with random load scaling, reactive offsets and voltage boxes.

    Many of these have a relaxation whose optimal face is not a single
    rank-one point, so the penalty iteration has work to do.
    """
    net = case("case9")
    rng = np.random.default_rng(seed)
    buses = []
    for b in net.buses:
        s = rng.uniform(0.6, 1.6)
        buses.append(dataclasses.replace(b, p_load=b.p_load * s, q_load=b.q_load * s + rng.uniform(-0.3, 0.1),
                                         v_min=rng.uniform(0.9, 0.98), v_max=rng.uniform(1.02, 1.1)))
    return net.with_buses(buses)


def solved_slot(net, load=None, price=0.1, dt=0.5, options=None):
    load = base_loads(net) if load is None else load
    prob, model = build_window_sdr(net, (1, 1), {1: load}, {1: price}, dt=dt)
    sol = solve(prob, options)
    return model, sol


def repair_instances(count: int = 20, start: int = 0):
    """First ``count`` perturbed 9-bus slots whose relaxation is feasible and not rank one."""
    out = []
    seed = start
    while len(out) < count:
        net = perturbed_case9(seed)
        model, sol = solved_slot(net)
        if sol.ok:
            rec = extract_slot(model, sol, 1)
            if rec.rank_gap > 1e-4:
                out.append((seed, net, rec))
        seed += 1
    return out


def desk9_scenario(seed: int, T: int = 4) -> Scenario:
    """Short perturbed 9-bus scenario with six vehicles."""
    net = perturbed_case9(seed)
    pevs = tuple(Pev(f"v{i}", (1, 2, 3)[i % 3], 1 + i % 2, T, capacity=30, soc0=0.2, p_max=20)
                 for i in range(6))
    load = (1.0, 0.9, 0.8, 0.85, 0.9, 0.95)[:T]
    price = (0.2, 0.1, 0.05, 0.08, 0.12, 0.15)[:T]
    return Scenario(net, pevs, Profile(load), Profile(price), T=T, dt=0.5, seed=seed, name=f"desk9-{seed}")


@pytest.fixture
def case2():
    return case("case2")


@pytest.fixture
def case3():
    return case("case3")


@pytest.fixture
def case9():
    return case("case9")
