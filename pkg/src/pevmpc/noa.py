"""Rank-one penalty iterations on top of the relaxation.

Each iteration linearizes ``lambda_max(W)`` at the current iterate through
its leading eigenvector ``w`` (``lambda_max(W') >= w^H W' w``) and solves
the convex problem

    min  F + mu * (Trace W - w^H W w)

so the penalized objective ``F + mu * (Trace W - lambda_max W)`` cannot go
up.  ``repair_slot`` works on one slot with the charging powers fixed,
``noa_offline_joint`` on the whole horizon with charging re-optimized, and
``dnoa_offline`` repairs every slot of a full-horizon relaxation
independently.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grid import Network
from .relax import (RANK_TOL, PevDemand, RecoveredSlot, WindowModel, build_window_sdr, extract_slot,
                    rank_gap)
from .sdp import OPTIMAL, SdpSolution, SolverOptions, max_eigpair, solve

MONOTONE_TOL = 1e-9
SUBPROBLEM_OPTIONS = SolverOptions(gap_tol=1e-9, feas_tol=1e-9)


class NoaError(RuntimeError):
    """A penalized subproblem could not be solved."""


def default_mu(network: Network) -> float:
    return 10.0 if network.n_bus <= 30 else 100.0


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weight and stopping rule.

    With ``auto`` the weight starts at ``mu`` and doubles whenever the rank
    gap has not dropped by 10% over the last 3 iterations.
    """

    mu: float = 10.0
    eps: float = RANK_TOL
    max_iter: int = 50
    auto: bool = False
    solver: SolverOptions = SUBPROBLEM_OPTIONS

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class NoaTrace:
    """Per-iteration record; entry 0 is the starting point."""

    penalized: list = field(default_factory=list)
    rank_gaps: list = field(default_factory=list)
    base: list = field(default_factory=list)
    mus: list = field(default_factory=list)
    converged: bool = False
    message: str = ""

    @property
    def iterations(self) -> int:
        return max(len(self.penalized) - 1, 0)

    def record(self, base: float, gap: float, mu: float):
        self.base.append(base)
        self.rank_gaps.append(gap)
        self.mus.append(mu)
        self.penalized.append(base + mu * gap)

    def monotone(self, rtol: float = MONOTONE_TOL) -> bool:
        """Penalized objective nonincreasing while ``mu`` is unchanged."""
        for k in range(1, len(self.penalized)):
            if self.mus[k] != self.mus[k - 1]:
                continue
            prev = self.penalized[k - 1]
            if self.penalized[k] > prev + rtol * max(1.0, abs(prev)):
                return False
        return True


def _next_mu(cfg: PenaltyConfig, trace: NoaTrace, mu: float) -> float:
    if not cfg.auto or len(trace.rank_gaps) < 4:
        return mu
    if trace.mus[-4] != mu:
        return mu
    if trace.rank_gaps[-1] > 0.9 * trace.rank_gaps[-4]:
        return 2.0 * mu
    return mu


def _penalty(W_by_slot: Mapping[int, np.ndarray], mu: float) -> dict:
    return {t: (mu, max_eigpair(W)[1]) for t, W in W_by_slot.items()}


def _check(sol: SdpSolution, what: str):
    if sol.status != OPTIMAL and not (sol.gap < 1e-6 and sol.primal_residual < 1e-6):
        raise NoaError(f"{what}: subproblem {sol.status} ({sol.message})")


# --------------------------------------------------------------------------
# Algorithm for one slot with fixed charging

def repair_slot(network: Network, t: int, load: np.ndarray, price: float,
                fixed: Mapping[str, float], stations: Mapping[str, int],
                start: RecoveredSlot, config: PenaltyConfig | None = None,
                dt: float = 0.5) -> tuple[RecoveredSlot, NoaTrace]:
    """Drive slot ``t`` to a rank-one ``W`` with the charges held at ``fixed``.

    ``start`` carries the relaxation's ``W`` and generation for the slot.
    Returns the final (or, past ``max_iter``, the last and best) iterate.
    """
    cfg = config or PenaltyConfig(mu=default_mu(network))
    trace = NoaTrace()
    mu = cfg.mu
    current = start
    trace.record(start.gen_cost + start.charge_cost, start.rank_gap, mu)
    if start.rank_gap <= cfg.eps:
        trace.converged = True
        return start, trace
    while trace.iterations < cfg.max_iter:
        prob, model = build_window_sdr(network, (t, t), {t: load}, {t: price}, (), dt,
                                       fixed_charges={t: dict(fixed)}, stations=stations,
                                       penalty=_penalty({t: current.W}, mu))
        sol = solve(prob, cfg.solver)
        _check(sol, f"slot {t} iteration {trace.iterations + 1}")
        current = extract_slot(model, sol, t, cfg.eps, stations=stations)
        trace.record(current.gen_cost + current.charge_cost, current.rank_gap, mu)
        if current.rank_gap <= cfg.eps:
            trace.converged = True
            return current, trace
        mu = _next_mu(cfg, trace, mu)
    trace.message = f"rank gap {current.rank_gap:.3e} above {cfg.eps:g} after {cfg.max_iter} iterations"
    return current, trace


# --------------------------------------------------------------------------
# joint full-horizon iteration

@dataclass
class JointResult:
    slots: dict                 # t -> RecoveredSlot
    trace: NoaTrace
    model: WindowModel
    solution: SdpSolution

    @property
    def total(self) -> float:
        return math.fsum(s.gen_cost + s.charge_cost for s in self.slots.values())


def _recover_all(model: WindowModel, sol: SdpSolution, eps: float) -> dict:
    return {t: extract_slot(model, sol, t, eps) for t in model.slots}


def noa_offline_joint(network: Network, window: tuple[int, int], loads: Mapping[int, np.ndarray],
                      prices: Mapping[int, float], demands: Sequence[PevDemand],
                      start: tuple[WindowModel, SdpSolution], config: PenaltyConfig | None = None,
                      dt: float = 0.5) -> JointResult:
    """Penalize ``sum_t (Trace W(t) - lambda_max W(t))`` over the horizon.

    ``start`` is the relaxation's model and solution.  Charging powers are
    re-optimized together with ``W`` and generation at every iteration.
    """
    cfg = config or PenaltyConfig(mu=default_mu(network))
    model, sol = start
    slots = _recover_all(model, sol, cfg.eps)
    trace = NoaTrace()
    mu = cfg.mu

    def record(slots):
        base = math.fsum(s.gen_cost + s.charge_cost for s in slots.values())
        gap = math.fsum(s.rank_gap for s in slots.values())
        trace.record(base, gap, mu)
        return gap

    gap = record(slots)
    while gap > cfg.eps and trace.iterations < cfg.max_iter:
        prob, model = build_window_sdr(network, window, loads, prices, demands, dt,
                                       penalty=_penalty({t: s.W for t, s in slots.items()}, mu))
        sol = solve(prob, cfg.solver)
        _check(sol, f"joint iteration {trace.iterations + 1}")
        slots = _recover_all(model, sol, cfg.eps)
        gap = record(slots)
        mu = _next_mu(cfg, trace, mu)
    trace.converged = gap <= cfg.eps
    if not trace.converged:
        trace.message = f"summed rank gap {gap:.3e} above {cfg.eps:g} after {cfg.max_iter} iterations"
    return JointResult(slots=slots, trace=trace, model=model, solution=sol)


# --------------------------------------------------------------------------
# per-slot decomposition

@dataclass
class SlotRepair:
    slot: int
    result: RecoveredSlot | None
    trace: NoaTrace | None
    error: str = ""


def dnoa_offline(network: Network, model: WindowModel, solution: SdpSolution,
                 config: PenaltyConfig | None = None, workers: int | None = None) -> dict:
    """Repair every slot of a full-horizon relaxation with its charges fixed.

    Slots fail individually: the error is stored in ``SlotRepair.error``.
    Returns ``{t: SlotRepair}``.
    """
    cfg = config or PenaltyConfig(mu=default_mu(network))
    stations = {d.pev.id: d.pev.station for d in model.demands}

    def one(t: int) -> SlotRepair:
        start = extract_slot(model, solution, t, cfg.eps)
        try:
            res, tr = repair_slot(network, t, model.loads[t], model.prices[t], start.charges,
                                  stations, start, cfg, model.dt)
        except NoaError as exc:
            return SlotRepair(t, None, None, str(exc))
        return SlotRepair(t, res, tr)

    if workers == 1 or len(model.slots) == 1:
        out = [one(t) for t in model.slots]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(one, model.slots))
    return {r.slot: r for r in out}


def eigen_bound_holds(W: np.ndarray, w: np.ndarray, tol: float = 1e-10) -> bool:
    """``lambda_max(W) >= w^H W w`` for a unit ``w``."""
    lam = max_eigpair(W)[0]
    val = float(np.real(np.conj(w) @ W @ w))
    return lam >= val - tol * max(1.0, abs(lam))


__all__ = ["PenaltyConfig", "NoaTrace", "NoaError", "repair_slot", "noa_offline_joint", "JointResult",
           "dnoa_offline", "SlotRepair", "default_mu", "eigen_bound_holds", "rank_gap"]
