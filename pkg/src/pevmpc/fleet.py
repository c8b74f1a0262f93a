"""PEV roster, remaining-demand ledger, active set and prediction horizon."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

TOL = 1e-9


class OverchargeError(ValueError):
    """A committed charge exceeds the vehicle's remaining demand."""


@dataclass(frozen=True)
class Pev:
    """One plug-in vehicle.

    Slots are 1-based; the vehicle may charge in every slot of
    ``arrival..departure`` inclusive.  ``max_stay`` is the optional time
    demand bound on ``departure - arrival``.
    """

    id: str
    station: int
    arrival: int
    departure: int
    capacity: float = 100.0     # kWh
    soc0: float = 0.2
    p_max: float = 20.0         # kW
    efficiency: float = 0.9     # u_h
    max_stay: int | None = None

    def __post_init__(self):
        if self.arrival < 1 or self.departure < self.arrival:
            raise ValueError(f"PEV {self.id}: need 1 <= arrival <= departure")
        if self.max_stay is not None and self.departure - self.arrival > self.max_stay:
            raise ValueError(f"PEV {self.id}: stay exceeds max_stay")
        if not self.capacity > 0:
            raise ValueError(f"PEV {self.id}: capacity must be positive")
        if not 0.0 <= self.soc0 <= 1.0:
            raise ValueError(f"PEV {self.id}: soc0 must lie in [0, 1]")
        if not self.p_max >= 0:
            raise ValueError(f"PEV {self.id}: p_max must be >= 0")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"PEV {self.id}: efficiency must lie in (0, 1]")


def initial_demand(pev: Pev) -> float:
    """Energy (kWh) to store before departure."""
    return pev.capacity * (1.0 - pev.soc0)


def check_admissible(pev: Pev, dt: float) -> bool:
    """Whether full-rate charging over the whole stay can meet the demand."""
    slots = pev.departure - pev.arrival + 1
    return pev.efficiency * pev.p_max * dt * slots >= initial_demand(pev)


@dataclass(frozen=True)
class FleetState:
    """Remaining demand (kWh) of every admitted vehicle, plus the clock."""

    pevs: Mapping[str, Pev] = field(default_factory=dict)
    remaining: Mapping[str, float] = field(default_factory=dict)
    clock: int = 1

    def admit(self, pev: Pev) -> "FleetState":
        if pev.id in self.pevs:
            raise ValueError(f"PEV {pev.id} already admitted")
        pevs = dict(self.pevs)
        pevs[pev.id] = pev
        rem = dict(self.remaining)
        rem[pev.id] = initial_demand(pev)
        return replace(self, pevs=pevs, remaining=rem)

    def evict(self, pev_id: str) -> "FleetState":
        pevs = {k: v for k, v in self.pevs.items() if k != pev_id}
        rem = {k: v for k, v in self.remaining.items() if k != pev_id}
        return replace(self, pevs=pevs, remaining=rem)

    def advance(self, t: int) -> "FleetState":
        return replace(self, clock=t)


def active_set(state: FleetState, t: int) -> list[Pev]:
    """Vehicles plugged in at ``t`` that still need energy, sorted by id."""
    out = [p for p in state.pevs.values()
           if p.arrival <= t <= p.departure and state.remaining[p.id] > TOL]
    return sorted(out, key=lambda p: p.id)


def horizon(state: FleetState, t: int) -> int:
    """Latest departure among the active vehicles (``t`` if none)."""
    return max([p.departure for p in active_set(state, t)], default=t)


def apply_charge(state: FleetState, pev: Pev, power: float, dt: float) -> FleetState:
    """Book ``power`` kW drawn for ``dt`` hours against ``pev``'s demand."""
    if power < 0:
        raise ValueError(f"PEV {pev.id}: negative charging power {power}")
    if power > pev.p_max * (1 + TOL) + TOL:
        raise ValueError(f"PEV {pev.id}: power {power} above p_max {pev.p_max}")
    if power == 0:
        return state
    left = state.remaining[pev.id] - pev.efficiency * power * dt
    if left < -TOL:
        raise OverchargeError(f"PEV {pev.id}: overcharged by {-left:.3g} kWh")
    if left <= TOL:
        left = 0.0
    rem = dict(state.remaining)
    rem[pev.id] = left
    return replace(state, remaining=rem)


# --------------------------------------------------------------------------
# roster CSV

ROSTER_FIELDS = ("id", "station", "arrival_slot", "departure_slot",
                 "capacity_kwh", "soc0", "pmax_kw", "uh")


def parse_roster(text: str) -> list[Pev]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != ROSTER_FIELDS:
        raise ValueError("roster CSV header must be " + ",".join(ROSTER_FIELDS))
    pevs = []
    for n, row in enumerate(reader, start=2):
        try:
            pevs.append(Pev(
                id=row["id"].strip(),
                station=int(row["station"]),
                arrival=int(row["arrival_slot"]),
                departure=int(row["departure_slot"]),
                capacity=float(row["capacity_kwh"]),
                soc0=float(row["soc0"]),
                p_max=float(row["pmax_kw"]),
                efficiency=float(row["uh"]),
            ))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"roster line {n}: {exc}") from None
    ids = [p.id for p in pevs]
    if len(set(ids)) != len(ids):
        raise ValueError("roster has duplicate ids")
    return pevs


def load_roster(path: str | Path) -> list[Pev]:
    return parse_roster(Path(path).read_text())


def write_roster(pevs: Iterable[Pev]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(ROSTER_FIELDS)
    for p in pevs:
        w.writerow([p.id, p.station, p.arrival, p.departure,
                    repr(p.capacity), repr(p.soc0), repr(p.p_max), repr(p.efficiency)])
    return out.getvalue()


def delivered(energy_by_slot: Mapping[int, float]) -> float:
    return math.fsum(energy_by_slot.values())
