"""Receding-horizon controller.

At slot ``t`` the controller relaxes the joint problem over ``[t, Psi(t)]``,
repairs slot ``t`` if its ``W`` is not rank one, commits only slot ``t``
and books the charges in the fleet ledger.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .fleet import FleetState, Pev, TOL, active_set, apply_charge, check_admissible, horizon, initial_demand
from .noa import NoaError, PenaltyConfig, default_mu, repair_slot
from .relax import (RANK_RATIO, PevDemand, build_window_sdr, charges_per_bus, extract_slot, flow_residual,
                    generation_cost, charging_cost, infeasibility_report, is_rank_one, numerical_rank,
                    project_boxes, recover_voltage)
from .sdp import INFEASIBLE, OPTIMAL, SdpSolution, SolverOptions, solve

if TYPE_CHECKING:
    from .scenario import Scenario

log = logging.getLogger(__name__)


class MpcError(RuntimeError):
    """A step could not produce controls; ``partial`` holds the run so far."""

    def __init__(self, message: str, partial: "MpcResult | None" = None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class MpcConfig:
    penalty: PenaltyConfig | None = None     # None: default_mu for the network
    solver: SolverOptions = SolverOptions()
    rank_ratio: float = RANK_RATIO
    # accept a stalled solve whose best iterate is this close to optimal
    accept_gap: float = 1e-5
    accept_feas: float = 1e-5


@dataclass
class MpcSlotRecord:
    slot: int
    voltages: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    charges: dict                # pev id -> kW
    gen_cost: float
    charge_cost: float
    sdr_rank: int
    noa_iters: int
    rank_gap: float
    flow_residual: float
    solve_ms: float
    window_end: int
    converged: bool = True
    evicted: tuple = ()

    @property
    def total_cost(self) -> float:
        return self.gen_cost + self.charge_cost

    @property
    def aggregate_charge(self) -> float:
        return math.fsum(self.charges.values())


@dataclass
class MpcResult:
    records: list = field(default_factory=list)
    delivered: dict = field(default_factory=dict)    # pev id -> kWh stored
    rejected: list = field(default_factory=list)     # (pev id, slot, reason)
    evicted: list = field(default_factory=list)      # (pev id, slot, reason)
    admitted: dict = field(default_factory=dict)     # pev id -> Pev
    scenario_id: str = ""

    @property
    def gen_cost(self) -> float:
        return math.fsum(r.gen_cost for r in self.records)

    @property
    def charge_cost(self) -> float:
        return math.fsum(r.charge_cost for r in self.records)

    @property
    def total(self) -> float:
        return self.gen_cost + self.charge_cost


def _usable(sol: SdpSolution, cfg: MpcConfig) -> bool:
    return sol.status == OPTIMAL or (sol.status != INFEASIBLE and sol.gap <= cfg.accept_gap
                                     and sol.primal_residual <= cfg.accept_feas)


def _eviction_candidate(state: FleetState, active: list[Pev], t: int) -> Pev:
    def pressure(p: Pev) -> tuple:
        return (state.remaining[p.id] / (p.departure - t + 1), p.id)
    return max(active, key=pressure)


def step(state: FleetState, t: int, scenario: "Scenario", config: MpcConfig | None = None
         ) -> tuple[MpcSlotRecord, FleetState, list]:
    """Solve, repair and commit slot ``t``.

    Returns the record, the updated state and the evictions made
    ``[(pev id, reason)]``.
    """
    cfg = config or MpcConfig()
    net = scenario.network
    pen = cfg.penalty or PenaltyConfig(mu=default_mu(net))
    dt = scenario.dt
    started = time.perf_counter()
    evictions = []
    while True:
        active = active_set(state, t)
        end = horizon(state, t)
        demands = [PevDemand(p, state.remaining[p.id]) for p in active]
        window = range(t, end + 1)
        prob, model = build_window_sdr(net, (t, end), {s: scenario.load_at(s) for s in window},
                                       {s: scenario.price_at(s) for s in window}, demands, dt)
        sol = solve(prob, cfg.solver)
        if _usable(sol, cfg):
            break
        if sol.status == INFEASIBLE and active:
            victim = _eviction_candidate(state, active, t)
            reason = f"window [{t}, {end}] infeasible ({infeasibility_report(model, sol)})"
            log.warning("slot %d: evicting PEV %s: %s", t, victim.id, reason)
            evictions.append((victim.id, reason))
            state = state.evict(victim.id)
            continue
        detail = infeasibility_report(model, sol) if sol.status == INFEASIBLE else sol.message
        raise MpcError(f"slot {t}: relaxation over [{t}, {end}] {sol.status}: {detail}")

    rec = extract_slot(model, sol, t, pen.eps)
    sdr_rank = numerical_rank(rec.W, cfg.rank_ratio)
    stations = {p.id: p.station for p in active}
    iters, converged = 0, True
    if not is_rank_one(rec.W, cfg.rank_ratio):
        try:
            rec, trace = repair_slot(net, t, scenario.load_at(t), scenario.price_at(t), rec.charges,
                                     stations, rec, pen, dt)
        except NoaError as exc:
            raise MpcError(f"slot {t}: {exc}") from None
        iters, converged = trace.iterations, trace.converged
        if not converged:
            log.warning("slot %d: %s", t, trace.message)

    # commit slot t; clip rounding noise against the hardware and the ledger
    committed = {}
    for p in active:
        kw = rec.charges.get(p.id, 0.0)
        cap = state.remaining[p.id] / (p.efficiency * dt)
        kw = min(max(kw, 0.0), p.p_max, cap)
        if kw <= TOL:
            kw = 0.0
        committed[p.id] = kw
        state = apply_charge(state, p, kw, dt)
    V, p_gen, q_gen = project_boxes(net, recover_voltage(rec.W, net.index(net.reference_bus)),
                                    rec.p_gen, rec.q_gen)
    resid = flow_residual(net, V, p_gen, q_gen, scenario.load_at(t), charges_per_bus(net, committed, stations))
    record = MpcSlotRecord(
        slot=t, voltages=V, p_gen=p_gen, q_gen=q_gen, charges=committed,
        gen_cost=generation_cost(net, p_gen, dt),
        charge_cost=charging_cost(committed, scenario.price_at(t), dt),
        sdr_rank=sdr_rank, noa_iters=iters, rank_gap=rec.rank_gap, flow_residual=resid,
        solve_ms=1000.0 * (time.perf_counter() - started), window_end=end, converged=converged,
        evicted=tuple(e[0] for e in evictions))
    return record, state.advance(t + 1), evictions


def run(scenario: "Scenario", config: MpcConfig | None = None) -> MpcResult:
    """Step through slots ``1..T``; vehicles join at their arrival slot.

    A failing step raises ``MpcError`` whose ``partial`` result holds the
    slots committed before it.
    """
    cfg = config or MpcConfig()
    result = MpcResult(scenario_id=scenario.fingerprint())
    state = FleetState()
    arrivals: dict[int, list[Pev]] = {}
    for p in sorted(scenario.pevs, key=lambda p: p.id):
        arrivals.setdefault(p.arrival, []).append(p)
    for t in range(1, scenario.T + 1):
        for p in arrivals.get(t, ()):
            if p.departure > scenario.T:
                result.rejected.append((p.id, t, "departs after the horizon"))
            elif not check_admissible(p, scenario.dt):
                result.rejected.append((p.id, t, "demand cannot be met at full rate"))
            else:
                state = state.admit(p)
                result.admitted[p.id] = p
                continue
            log.warning("slot %d: rejected PEV %s: %s", t, p.id, result.rejected[-1][2])
        try:
            record, state, evicted = step(state, t, scenario, cfg)
        except MpcError as exc:
            exc.partial = _finish(result, state)
            raise
        for pid, reason in evicted:
            result.evicted.append((pid, t, reason))
        result.records.append(record)
    return _finish(result, state)


def _finish(result: MpcResult, state: FleetState) -> MpcResult:
    result.delivered = {}
    for pid, p in result.admitted.items():
        if pid in state.remaining:
            result.delivered[pid] = initial_demand(p) - state.remaining[pid]
    for pid, _, _ in result.evicted:
        result.delivered.pop(pid, None)
    return result


def total_cost(result: MpcResult, scenario: "Scenario") -> tuple[float, float, float]:
    """Generation, charging and total cost recomputed from committed controls."""
    net = scenario.network
    gen = math.fsum(generation_cost(net, r.p_gen, scenario.dt) for r in result.records)
    chg = math.fsum(charging_cost(r.charges, scenario.price_at(r.slot), scenario.dt) for r in result.records)
    return gen, chg, gen + chg


def delivered_from_records(result: MpcResult, dt: float) -> dict:
    """kWh stored per vehicle, summed from the committed charges."""
    out: dict[str, float] = {}
    for r in result.records:
        for pid, kw in r.charges.items():
            out[pid] = out.get(pid, 0.0) + result.admitted[pid].efficiency * kw * dt
    return out
