"""Scenarios, offline lower bounds and online/offline comparison."""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from .fleet import Pev, check_admissible, initial_demand, load_roster, write_roster
from .grid import Network, Profile, load_case, load_profile, serialize_case, slot_loads, validate, write_profile
from .noa import PenaltyConfig, default_mu, dnoa_offline, noa_offline_joint
from .relax import (RANK_RATIO, PevDemand, build_window_sdr, extract_slot, infeasibility_report, is_rank_one,
                    numerical_rank, project_boxes)
from .sdp import OPTIMAL, SolverOptions, solve

if TYPE_CHECKING:
    from .mpc import MpcResult

ARRIVAL_MEAN_H = 20.0
ARRIVAL_SD_H = 1.5
ARRIVAL_WINDOW_H = (18.0, 24.0)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class FleetDefaults:
    capacity: float = 100.0     # kWh
    soc0: float = 0.2
    p_max: float = 20.0         # kW
    efficiency: float = 0.9


@dataclass(frozen=True)
class Scenario:
    network: Network
    pevs: tuple
    load_profile: Profile
    price_profile: Profile
    T: int = 24
    dt: float = 0.5
    seed: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.T < 1:
            raise ScenarioError("T must be >= 1")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        for what, prof in (("load", self.load_profile), ("price", self.price_profile)):
            if len(prof) != self.T:
                raise ScenarioError(f"{what} profile has {len(prof)} slots, expected T = {self.T}")
        gens = set(self.network.gen_set)
        for p in self.pevs:
            if p.station not in gens:
                raise ScenarioError(f"PEV {p.id} is stationed at non-generator bus {p.station}")
        problems = validate(self.network)
        if problems:
            raise ScenarioError("invalid network: " + "; ".join(problems))

    @cached_property
    def loads(self) -> np.ndarray:
        """(T, N) complex per-unit loads."""
        return slot_loads(self.network, self.load_profile, self.T)

    def load_at(self, t: int) -> np.ndarray:
        return self.loads[t - 1]

    def price_at(self, t: int) -> float:
        return self.price_profile[t]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (serialize_case(self.network), write_roster(sorted(self.pevs, key=lambda p: p.id)),
                     write_profile(self.load_profile), write_profile(self.price_profile),
                     f"{self.T}|{self.dt!r}"):
            h.update(part.encode())
            h.update(b"\0")
        return h.hexdigest()[:16]

    def admissible(self) -> tuple[list, list]:
        """Split the roster into admitted vehicles and ``(id, reason)`` rejects."""
        ok, rejected = [], []
        for p in sorted(self.pevs, key=lambda p: p.id):
            if p.departure > self.T:
                rejected.append((p.id, "departs after the horizon"))
            elif not check_admissible(p, self.dt):
                rejected.append((p.id, "demand cannot be met at full rate"))
            else:
                ok.append(p)
        return ok, rejected


# --------------------------------------------------------------------------
# sampling

def sample_arrivals(seed: int, count: int, mean_h: float = ARRIVAL_MEAN_H, sd_h: float = ARRIVAL_SD_H,
                    window: tuple[float, float] = ARRIVAL_WINDOW_H, dt: float = 0.5, T: int = 24) -> list[int]:
    """Arrival slots from a normal law truncated to ``window`` (hours).

    Hour ``h`` maps to slot ``ceil((h - window[0]) / dt)`` clamped to ``1..T``.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    lo, hi = window
    if not hi > lo:
        raise ValueError("arrival window is empty")
    hours = sample_arrival_hours(seed, count, mean_h, sd_h, window)
    return [min(max(math.ceil((h - lo) / dt), 1), T) for h in hours]


def sample_arrival_hours(seed: int, count: int, mean_h: float = ARRIVAL_MEAN_H, sd_h: float = ARRIVAL_SD_H,
                         window: tuple[float, float] = ARRIVAL_WINDOW_H) -> np.ndarray:
    lo, hi = window
    if not hi > lo:
        raise ValueError("arrival window is empty")
    dist = truncnorm((lo - mean_h) / sd_h, (hi - mean_h) / sd_h, loc=mean_h, scale=sd_h)
    u = np.random.default_rng(seed).random(count)
    h = dist.ppf(u)
    # ppf(1) would give hi; the window is half open
    return np.minimum(h, np.nextafter(hi, lo))


def build_fleet(seed: int, counts: Mapping[int, int], defaults: FleetDefaults = FleetDefaults(),
                T: int = 24, dt: float = 0.5, stations: Sequence[int] | None = None) -> list[Pev]:
    """Sample a roster with ``counts[bus]`` vehicles per station, departing at ``T``."""
    if stations is not None:
        bad = sorted(set(counts) - set(stations))
        if bad:
            raise ScenarioError(f"stations {bad} are not generator buses")
    total = sum(counts.values())
    slots = sample_arrivals(seed, total, dt=dt, T=T)
    pevs = []
    k = 0
    for bus in sorted(counts):
        for _ in range(counts[bus]):
            p = Pev(id=f"pev{k + 1:03d}", station=bus, arrival=slots[k], departure=T,
                    capacity=defaults.capacity, soc0=defaults.soc0, p_max=defaults.p_max,
                    efficiency=defaults.efficiency)
            if not check_admissible(p, dt):
                raise ScenarioError(f"defaults cannot deliver {initial_demand(p):g} kWh to {p.id} "
                                    f"arriving at slot {p.arrival} by slot {T}")
            pevs.append(p)
            k += 1
    return pevs


def split_uniform(total: int, stations: Sequence[int]) -> dict:
    """Spread ``total`` vehicles over ``stations`` as evenly as possible."""
    n = len(stations)
    return {s: total // n + (1 if i < total % n else 0) for i, s in enumerate(sorted(stations))}


# --------------------------------------------------------------------------
# scenario files

def _data_path(name: str) -> Path:
    return Path(str(resources.files("pevmpc") / "data" / name))


def bundled_scenario_path() -> Path:
    return _data_path("case9_scenario.ini")


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    """Read a scenario file; relative paths resolve against its directory.

    ``builtin:<name>`` refers to a file shipped with the package.
    """
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise ScenarioError(f"{path}: {exc}") from None

    def resolve(value: str) -> Path:
        value = value.strip()
        if value.startswith("builtin:"):
            return _data_path(value[len("builtin:"):])
        p = Path(value)
        return p if p.is_absolute() else path.parent / p

    def need(section: str, key: str) -> str:
        if not cp.has_option(section, key):
            raise ScenarioError(f"{path}: missing [{section}] {key}")
        return cp.get(section, key)

    try:
        network = load_case(resolve(need("network", "case")))
        T = cp.getint("horizon", "T", fallback=24)
        dt = cp.getfloat("horizon", "dt_hours", fallback=0.5)
        load_prof = load_profile(resolve(need("profiles", "load")))
        price_prof = load_profile(resolve(need("profiles", "price")))
        fleet_seed = seed if seed is not None else cp.getint("fleet", "seed", fallback=0)
        if cp.has_option("fleet", "roster"):
            pevs = load_roster(resolve(cp.get("fleet", "roster")))
        else:
            defaults = FleetDefaults(
                capacity=cp.getfloat("fleet", "capacity_kwh", fallback=100.0),
                soc0=cp.getfloat("fleet", "soc0", fallback=0.2),
                p_max=cp.getfloat("fleet", "pmax_kw", fallback=20.0),
                efficiency=cp.getfloat("fleet", "uh", fallback=0.9))
            if cp.has_option("fleet", "counts"):
                nums = [int(x) for x in cp.get("fleet", "counts").split(",") if x.strip()]
                gens = sorted(network.gen_set)
                if len(nums) != len(gens):
                    raise ScenarioError(f"{path}: [fleet] counts needs {len(gens)} entries (one per generator bus)")
                counts = dict(zip(gens, nums))
            else:
                counts = split_uniform(cp.getint("fleet", "total", fallback=0), network.gen_set)
            pevs = build_fleet(fleet_seed, counts, defaults, T, dt, network.gen_set)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"{path}: {exc}") from None
    return Scenario(network=network, pevs=tuple(pevs), load_profile=load_prof, price_profile=price_prof,
                    T=T, dt=dt, seed=fleet_seed, name=path.stem)


def write_scenario(scenario: Scenario, directory: str | Path) -> Path:
    """Write a self-contained scenario (case, roster, profiles, ini)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "case.txt").write_text(serialize_case(scenario.network))
    (d / "roster.csv").write_text(write_roster(sorted(scenario.pevs, key=lambda p: p.id)))
    (d / "load.csv").write_text(write_profile(scenario.load_profile))
    (d / "price.csv").write_text(write_profile(scenario.price_profile))
    ini = (
        "[network]\ncase = case.txt\n\n"
        f"[fleet]\nroster = roster.csv\nseed = {scenario.seed if scenario.seed is not None else 0}\n\n"
        "[profiles]\nload = load.csv\nprice = price.csv\n\n"
        f"[horizon]\nT = {scenario.T}\ndt_hours = {scenario.dt!r}\n"
    )
    out = d / "scenario.ini"
    out.write_text(ini)
    return out


# --------------------------------------------------------------------------
# offline computation

@dataclass
class OfflineSlot:
    slot: int
    sdr_rank: int
    sdr_rank_gap: float
    rank_gap: float
    noa_iters: int
    gen_cost: float
    charge_cost: float
    voltages: np.ndarray | None
    p_gen: np.ndarray
    aggregate_charge: float
    converged: bool = True
    error: str = ""


@dataclass
class OfflineResult:
    method: str
    bound: float
    value: float
    schedule: dict              # (pev id, slot) -> kW
    slots: list                 # OfflineSlot
    iterations: int
    converged: bool
    rank_one: bool              # relaxation already rank one on every slot
    delivered: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)
    scenario_id: str = ""

    @property
    def gen_cost(self) -> float:
        return math.fsum(s.gen_cost for s in self.slots)

    @property
    def charge_cost(self) -> float:
        return math.fsum(s.charge_cost for s in self.slots)


class OfflineError(RuntimeError):
    pass


# the bound is compared against repaired values solved at this accuracy
BOUND_OPTIONS = SolverOptions(gap_tol=1e-9, feas_tol=1e-9)


def _schedule(model, sol) -> dict:
    return {(pid, t): float(sol.scalars[k]) for (pid, t), k in sorted(model.charge.items())}


def _delivered(schedule: Mapping, pevs: Mapping[str, Pev], dt: float) -> dict:
    out = {pid: 0.0 for pid in pevs}
    for (pid, _), kw in schedule.items():
        out[pid] += pevs[pid].efficiency * kw * dt
    return out


def run_offline(scenario: Scenario, method: str = "joint", penalty: PenaltyConfig | None = None,
                solver: SolverOptions | None = None, workers: int | None = None) -> OfflineResult:
    """Full-horizon relaxation (the lower bound), then rank repair.

    ``method`` is ``"joint"`` (one penalty over all slots, charging
    re-optimized) or ``"dnoa"`` (per-slot repair with the relaxation's
    charging schedule).
    """
    if method not in ("joint", "dnoa"):
        raise ValueError(f"unknown method {method!r} (expected joint or dnoa)")
    net = scenario.network
    pen = penalty or PenaltyConfig(mu=default_mu(net))
    admitted, rejected = scenario.admissible()
    demands = [PevDemand(p, initial_demand(p)) for p in admitted if initial_demand(p) > 0]
    T = scenario.T
    loads = {t: scenario.load_at(t) for t in range(1, T + 1)}
    prices = {t: scenario.price_at(t) for t in range(1, T + 1)}
    prob, model = build_window_sdr(net, (1, T), loads, prices, demands, scenario.dt)
    sol = solve(prob, solver or BOUND_OPTIONS)
    if sol.status != OPTIMAL and not (sol.gap < 1e-5 and sol.primal_residual < 1e-5):
        detail = infeasibility_report(model, sol) if sol.status == "infeasible" else sol.message
        raise OfflineError(f"full-horizon relaxation {sol.status}: {detail}")
    # the dual objective is a certified lower bound on the relaxation optimum
    bound = min(sol.dual_objective, model.total_cost(sol)[2])
    sdr = {t: extract_slot(model, sol, t, pen.eps) for t in model.slots}
    ranks = {t: numerical_rank(r.W, RANK_RATIO) for t, r in sdr.items()}
    all_rank_one = all(is_rank_one(r.W, RANK_RATIO) for r in sdr.values())
    by_id = {p.id: p for p in admitted}

    def slot_row(t, rec, iters, converged=True, error=""):
        V, p_gen = None, rec.p_gen
        if rec.rank_gap <= pen.eps:
            V, p_gen, _ = project_boxes(net, rec.V, rec.p_gen, rec.q_gen)
        return OfflineSlot(slot=t, sdr_rank=ranks[t], sdr_rank_gap=sdr[t].rank_gap, rank_gap=rec.rank_gap,
                           noa_iters=iters, gen_cost=rec.gen_cost, charge_cost=rec.charge_cost, voltages=V,
                           p_gen=p_gen, aggregate_charge=math.fsum(rec.charges.values()),
                           converged=converged, error=error)

    if all_rank_one:
        schedule = _schedule(model, sol)
        rows = [slot_row(t, sdr[t], 0) for t in model.slots]
        return OfflineResult(method=method, bound=bound, value=bound, schedule=schedule, slots=rows,
                             iterations=0, converged=True, rank_one=True,
                             delivered=_delivered(schedule, by_id, scenario.dt), rejected=rejected,
                             scenario_id=scenario.fingerprint())

    if method == "joint":
        res = noa_offline_joint(net, (1, T), loads, prices, demands, (model, sol), pen, scenario.dt)
        schedule = _schedule(res.model, res.solution)
        rows = [slot_row(t, res.slots[t], res.trace.iterations, res.trace.converged) for t in model.slots]
        value = math.fsum(r.gen_cost + r.charge_cost for r in rows)
        iterations, converged = res.trace.iterations, res.trace.converged
    else:
        reps = dnoa_offline(net, model, sol, pen, workers=workers)
        schedule = _schedule(model, sol)
        rows = []
        for t in model.slots:
            r = reps[t]
            if r.result is None:
                rows.append(slot_row(t, sdr[t], 0, False, r.error))
            else:
                rows.append(slot_row(t, r.result, r.trace.iterations, r.trace.converged))
        value = math.fsum(r.gen_cost + r.charge_cost for r in rows)
        iterations = max(r.noa_iters for r in rows)
        converged = all(r.converged for r in rows)
    return OfflineResult(method=method, bound=bound, value=value, schedule=schedule, slots=rows,
                         iterations=iterations, converged=converged, rank_one=False,
                         delivered=_delivered(schedule, by_id, scenario.dt), rejected=rejected,
                         scenario_id=scenario.fingerprint())


# --------------------------------------------------------------------------
# comparison

@dataclass
class Comparison:
    online_total: float
    offline_value: float
    offline_bound: float
    ratio: float                # offline / online
    online_load: list           # aggregate kW per slot
    offline_load: list
    flags: list = field(default_factory=list)


def offline_load_series(offline: OfflineResult, T: int) -> list:
    out = [0.0] * T
    for (_, t), kw in offline.schedule.items():
        out[t - 1] += kw
    return out


def compare(online: "MpcResult", offline: OfflineResult, rtol: float = 1e-6) -> Comparison:
    """Totals, the offline/online ratio and both charging-load series."""
    if online.scenario_id and offline.scenario_id and online.scenario_id != offline.scenario_id:
        raise ScenarioError("online and offline results come from different scenarios")
    T = len(online.records)
    on_load = [r.aggregate_charge for r in online.records]
    off_load = offline_load_series(offline, max(T, max((t for _, t in offline.schedule), default=0)))
    flags = []
    scale = max(1.0, abs(online.total))
    if offline.bound > offline.value + rtol * scale:
        flags.append("offline bound above offline value")
    if offline.value > online.total + rtol * scale:
        flags.append("offline value above online total")
    ratio = offline.value / online.total if online.total != 0 else 1.0
    return Comparison(online_total=online.total, offline_value=offline.value, offline_bound=offline.bound,
                      ratio=ratio, online_load=on_load, offline_load=off_load, flags=flags)
