"""Semidefinite relaxation of the joint OPF and charging problem.

For every slot ``t'`` of a window the complex matrix ``W(t') = V V^H`` is
carried as a Hermitian variable (a real ``2N x 2N`` embedded block).  The
balance at bus ``k`` reads

    sum_{m in N(k)} (W_kk - W_km) conj(y_km) = S_gen - S_load - P_charge

split into real and imaginary rows.  Charging powers are in kW, network
quantities in per unit, money in the cost polynomial's units; every cost
term is multiplied by the slot length ``dt`` (hours).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fleet import Pev
from .grid import Network
from .sdp import EQ, LE, HermitianEmbedding, Lin, SdpBuilder, SdpProblem, SdpSolution, embed_hermitian, max_eigpair

RANK_TOL = 1e-4             # rank gap accepted as rank one
RANK_RATIO = 1e-6           # lambda_2 / lambda_1 for "already rank one"
PSD_TOL = 1e-8


class WindowError(ValueError):
    pass


def kw_to_pu(network: Network) -> float:
    return 1.0 / (1000.0 * network.base_mva)


@dataclass(frozen=True)
class PevDemand:
    """A vehicle taking part in a window with its outstanding demand (kWh)."""

    pev: Pev
    remaining: float


@dataclass
class WindowModel:
    """Index map from grid and fleet quantities to SDP variables."""

    network: Network
    slots: tuple
    dt: float
    loads: dict                 # slot -> complex (n_bus,) p.u.
    prices: dict                # slot -> $/kWh
    demands: tuple              # PevDemand
    fixed: dict                 # slot -> {pev_id: kW}
    herm: dict = field(default_factory=dict)        # slot -> HermitianEmbedding
    pg: dict = field(default_factory=dict)          # (slot, g) -> scalar
    qg: dict = field(default_factory=dict)
    epigraph: dict = field(default_factory=dict)    # (slot, g) -> block id
    charge: dict = field(default_factory=dict)      # (pev_id, slot) -> scalar
    rows: dict = field(default_factory=dict)        # class -> [row ids]
    rate_bounds: list = field(default_factory=list)  # (pev_id, slot, side)
    penalty: dict = field(default_factory=dict)     # slot -> (mu, w)

    def add_row(self, cls: str, row: int):
        self.rows.setdefault(cls, []).append(row)

    def charges_at(self, solution: SdpSolution, t: int) -> dict:
        """kW drawn by every vehicle at slot ``t`` (variables and fixed)."""
        out = dict(self.fixed.get(t, {}))
        for d in self.demands:
            k = self.charge.get((d.pev.id, t))
            if k is not None:
                out[d.pev.id] = float(solution.scalars[k])
        return out

    def hermitian(self, solution: SdpSolution, t: int) -> np.ndarray:
        emb = self.herm[t]
        return emb.hermitian(solution.blocks[emb.block])

    def generation(self, solution: SdpSolution, t: int) -> tuple[np.ndarray, np.ndarray]:
        ng = len(self.network.generators)
        p = np.array([solution.scalars[self.pg[(t, g)]] for g in range(ng)])
        q = np.array([solution.scalars[self.qg[(t, g)]] for g in range(ng)])
        return p, q

    def generation_cost(self, solution: SdpSolution, t: int) -> float:
        p, _ = self.generation(solution, t)
        return generation_cost(self.network, p, self.dt)

    def charging_cost(self, solution: SdpSolution, t: int) -> float:
        return charging_cost(self.charges_at(solution, t), self.prices[t], self.dt)

    def total_cost(self, solution: SdpSolution) -> tuple[float, float, float]:
        gen = math.fsum(self.generation_cost(solution, t) for t in self.slots)
        chg = math.fsum(self.charging_cost(solution, t) for t in self.slots)
        return gen, chg, gen + chg

    def count(self, cls: str) -> int:
        return len(self.rows.get(cls, ()))


def generation_cost(network: Network, p_gen: Sequence[float], dt: float) -> float:
    return dt * math.fsum(g.cost(p, network.base_mva) for g, p in zip(network.generators, p_gen))


def charging_cost(charges: Mapping[str, float], price: float, dt: float) -> float:
    return dt * price * math.fsum(charges.values())


def _balance_terms(emb: HermitianEmbedding, k: int, nbrs) -> tuple[Lin, Lin]:
    """Real and imaginary parts of sum_m (W_kk - W_km) conj(y_km)."""
    re_row, im_row = Lin(), Lin()
    for m, y in nbrs:
        g, b = y.real, y.imag
        # (dr + j di)(g - j b), dr = W_kk - Re W_km, di = -Im W_km
        re_row.add(emb.re(k, k, g)).add(emb.re(k, m, -g)).add(emb.im(k, m, -b))
        im_row.add(emb.im(k, m, -g)).add(emb.re(k, k, -b)).add(emb.re(k, m, b))
    return re_row, im_row


def build_window_sdr(network: Network,
                     window: tuple[int, int],
                     loads: Mapping[int, np.ndarray],
                     prices: Mapping[int, float],
                     demands: Sequence[PevDemand] = (),
                     dt: float = 0.5,
                     fixed_charges: Mapping[int, Mapping[str, float]] | None = None,
                     penalty: Mapping[int, tuple[float, np.ndarray]] | None = None,
                     stations: Mapping[str, int] | None = None,
                     ) -> tuple[SdpProblem, WindowModel]:
    """Assemble the relaxation over slots ``window[0]..window[1]``.

    ``demands`` get charge variables on ``max(start, arrival)..departure``
    and a completion row.  ``fixed_charges`` (slot -> {pev id: kW}) enter
    the balance as known loads; their stations come from ``stations``.
    ``penalty`` maps a slot to ``(mu, w)`` and adds
    ``mu * (Trace W - w^H W w)`` to the objective.
    """
    t0, t1 = window
    if t1 < t0:
        raise WindowError(f"empty window [{t0}, {t1}]")
    slots = tuple(range(t0, t1 + 1))
    fixed = {t: dict(v) for t, v in (fixed_charges or {}).items() if t in slots}
    stations = dict(stations or {})
    for t in slots:
        if t not in loads or t not in prices:
            raise WindowError(f"no load/price data for slot {t}")
        if len(loads[t]) != network.n_bus:
            raise WindowError(f"slot {t}: load vector has {len(loads[t])} entries, "
                              f"network has {network.n_bus} buses")
    gset = set(network.gen_set)
    for d in demands:
        if d.pev.station not in gset:
            raise WindowError(f"PEV {d.pev.id} is stationed at non-generator bus {d.pev.station}")
        stations[d.pev.id] = d.pev.station
    for t, ch in fixed.items():
        for pid in ch:
            if pid not in stations:
                raise WindowError(f"fixed charge for unknown PEV {pid}")

    model = WindowModel(network=network, slots=slots, dt=dt,
                        loads={t: np.asarray(loads[t]) for t in slots},
                        prices={t: float(prices[t]) for t in slots},
                        demands=tuple(demands), fixed=fixed,
                        penalty=dict(penalty or {}))
    bld = SdpBuilder()
    n = network.n_bus
    base = network.base_mva
    kappa = kw_to_pu(network)
    nbrs = network.neighbors()

    for t in slots:
        emb = embed_hermitian(n, bld, structure=False)
        model.herm[t] = emb

        # generation variables, boxes and cost
        for g, gen in enumerate(network.generators):
            p = bld.add_scalar()
            q = bld.add_scalar()
            model.pg[(t, g)] = p
            model.qg[(t, g)] = q
            for var, lo, hi, cls in ((p, gen.p_min, gen.p_max, "gen_p"), (q, gen.q_min, gen.q_max, "gen_q")):
                if hi - lo <= 1e-9:
                    model.add_row(cls, bld.add_constraint(Lin.scalar(var), EQ, hi, tag=cls))
                else:
                    model.add_row(cls, bld.add_constraint(Lin.scalar(var), LE, hi, tag=cls))
                    model.add_row(cls, bld.add_constraint(Lin.scalar(var, -1.0), LE, -lo, tag=cls))
            c2 = gen.c2 * base * base
            c1 = gen.c1 * base
            if c2 > 0:
                e = bld.add_block(2)
                model.epigraph[(t, g)] = e
                model.add_row("epigraph", bld.add_constraint(Lin.entry(e, 1, 1), EQ, 1.0, tag="epigraph"))
                model.add_row("epigraph", bld.add_constraint(
                    Lin.entry(e, 0, 1) + Lin.scalar(p, -math.sqrt(c2)), EQ, 0.0, tag="epigraph"))
                bld.add_objective(Lin.entry(e, 0, 0, dt))
            bld.add_objective(Lin.scalar(p, dt * c1), constant=dt * gen.c0)

        # charging variables at this slot
        at_bus: dict[int, list[int]] = {}
        for d in demands:
            pev = d.pev
            if max(t0, pev.arrival) <= t <= pev.departure:
                k = bld.add_scalar(nonneg=True)
                model.charge[(pev.id, t)] = k
                at_bus.setdefault(pev.station, []).append(k)
                model.rate_bounds.append((pev.id, t, "lower"))
                if pev.p_max > 0:
                    model.add_row("rate", bld.add_constraint(Lin.scalar(k), LE, pev.p_max, tag="rate"))
                else:
                    model.add_row("rate", bld.add_constraint(Lin.scalar(k), EQ, 0.0, tag="rate"))
                model.rate_bounds.append((pev.id, t, "upper"))
                bld.add_objective(Lin.scalar(k, dt * model.prices[t]))
        fixed_bus = np.zeros(n)
        for pid, kw in fixed.get(t, {}).items():
            fixed_bus[network.index(stations[pid])] += kw * kappa

        # balance rows
        load = model.loads[t]
        for bus in network.buses:
            k = network.index(bus.id)
            re_row, im_row = _balance_terms(emb, k, [(network.index(m), y) for m, y in nbrs[bus.id]])
            for g in network.generators_at(bus.id):
                re_row.add(Lin.scalar(model.pg[(t, g)], -1.0))
                im_row.add(Lin.scalar(model.qg[(t, g)], -1.0))
            for kk in at_bus.get(bus.id, ()):
                re_row.add(Lin.scalar(kk, kappa))
            model.add_row("balance", bld.add_constraint(
                re_row, EQ, -load[k].real - fixed_bus[k], tag="balance"))
            model.add_row("balance", bld.add_constraint(im_row, EQ, -load[k].imag, tag="balance"))

        # voltage box
        for bus in network.buses:
            k = network.index(bus.id)
            lo, hi = bus.v_min ** 2, bus.v_max ** 2
            if hi - lo <= 1e-12:
                model.add_row("voltage", bld.add_constraint(emb.re(k, k), EQ, hi, tag="voltage"))
            else:
                model.add_row("voltage", bld.add_constraint(emb.re(k, k), LE, hi, tag="voltage"))
                model.add_row("voltage", bld.add_constraint(emb.re(k, k, -1.0), LE, -lo, tag="voltage"))

        # angle difference, two sided
        for ln in network.lines:
            k, m = network.index(ln.from_bus), network.index(ln.to_bus)
            tan = math.tan(ln.theta_max)
            model.add_row("angle", bld.add_constraint(
                emb.im(k, m) + emb.re(k, m, -tan), LE, 0.0, tag="angle"))
            model.add_row("angle", bld.add_constraint(
                emb.im(k, m, -1.0) + emb.re(k, m, -tan), LE, 0.0, tag="angle"))

        if t in model.penalty:
            mu, w = model.penalty[t]
            bld.add_objective(emb.trace(mu) - emb.quad(w, mu))

    # completion
    for d in demands:
        pev = d.pev
        row = Lin()
        for t in slots:
            k = model.charge.get((pev.id, t))
            if k is not None:
                row.add(Lin.scalar(k, pev.efficiency * dt))
        if not row.sca:
            raise WindowError(f"PEV {pev.id} has no slot inside the window")
        model.add_row("completion", bld.add_constraint(row, EQ, d.remaining, tag="completion"))

    return bld.build(), model


# --------------------------------------------------------------------------
# rank and recovery

def rank_gap(W: np.ndarray, psd_tol: float = PSD_TOL) -> float:
    """``Trace(W) - lambda_max(W)``; zero exactly for rank-one PSD matrices."""
    lam = np.linalg.eigvalsh(0.5 * (W + W.conj().T))
    scale = max(1.0, abs(lam[-1]))
    if lam[0] < -psd_tol * scale:
        raise ValueError(f"matrix is not PSD (min eigenvalue {lam[0]:.3e})")
    gap = float(np.sum(lam[:-1]))
    if abs(gap) <= 1e-12:
        gap = 0.0
    return max(gap, 0.0)


def numerical_rank(W: np.ndarray, ratio: float = RANK_RATIO) -> int:
    lam = np.linalg.eigvalsh(0.5 * (W + W.conj().T))
    if lam[-1] <= 0:
        return 0
    return int(np.sum(lam > ratio * lam[-1]))


def is_rank_one(W: np.ndarray, ratio: float = RANK_RATIO) -> bool:
    lam = np.linalg.eigvalsh(0.5 * (W + W.conj().T))
    return lam[-1] > 0 and lam[-2] <= ratio * lam[-1] if len(lam) > 1 else lam[-1] > 0


def recover_voltage(W: np.ndarray, reference: int = 0) -> np.ndarray:
    """``sqrt(lambda_max) * w_max`` rotated so bus ``reference`` has angle 0."""
    lam, w = max_eigpair(np.asarray(W, dtype=complex))
    if lam <= 0:
        raise ValueError("largest eigenvalue is not positive")
    V = math.sqrt(lam) * w
    if abs(V[reference]) > 0:
        V = V * np.exp(-1j * np.angle(V[reference]))
    return V


def bus_injections(network: Network, V: np.ndarray) -> np.ndarray:
    """Complex power ``V_k conj(sum_m y_km (V_k - V_m))`` leaving each bus."""
    Y = network.admittance_matrix()
    return V * np.conj(Y @ V)


def flow_residual(network: Network, V: np.ndarray, p_gen: Sequence[float], q_gen: Sequence[float],
                  loads: np.ndarray, charges: np.ndarray) -> float:
    """Largest bus power mismatch (p.u.).

    ``loads`` is the complex per-bus load and ``charges`` the per-bus
    charging power, both in per unit.
    """
    inj = -np.asarray(loads, dtype=complex) - np.asarray(charges, dtype=float)
    for g, gen in enumerate(network.generators):
        inj[network.index(gen.bus)] += p_gen[g] + 1j * q_gen[g]
    return float(np.max(np.abs(bus_injections(network, np.asarray(V)) - inj)))


def charges_per_bus(network: Network, charges: Mapping[str, float], stations: Mapping[str, int]) -> np.ndarray:
    out = np.zeros(network.n_bus)
    kappa = kw_to_pu(network)
    for pid, kw in charges.items():
        out[network.index(stations[pid])] += kw * kappa
    return out


@dataclass
class RecoveredSlot:
    slot: int
    W: np.ndarray
    V: np.ndarray | None
    p_gen: np.ndarray
    q_gen: np.ndarray
    charges: dict
    rank_gap: float
    flow_residual: float | None
    gen_cost: float
    charge_cost: float

    @property
    def voltage_available(self) -> bool:
        return self.V is not None


def extract_slot(model: WindowModel, solution: SdpSolution, t: int, eps: float = RANK_TOL,
                 stations: Mapping[str, int] | None = None) -> RecoveredSlot:
    """Read slot ``t`` out of a solved window."""
    if t not in model.herm:
        raise KeyError(f"slot {t} is outside the window {model.slots[0]}..{model.slots[-1]}")
    net = model.network
    W = model.hermitian(solution, t)
    gap = rank_gap(W)
    p, q = model.generation(solution, t)
    charges = model.charges_at(solution, t)
    st = {d.pev.id: d.pev.station for d in model.demands}
    st.update(stations or {})
    V = None
    resid = None
    if gap <= eps:
        V = recover_voltage(W, net.index(net.reference_bus))
        resid = flow_residual(net, V, p, q, model.loads[t], charges_per_bus(net, charges, st))
    return RecoveredSlot(slot=t, W=W, V=V, p_gen=p, q_gen=q, charges=charges, rank_gap=gap,
                         flow_residual=resid, gen_cost=generation_cost(net, p, model.dt),
                         charge_cost=charging_cost(charges, model.prices[t], model.dt))


def infeasibility_report(model: WindowModel, solution: SdpSolution) -> str:
    """Constraint classes ranked by the weight of the dual ray on them."""
    y = np.abs(np.asarray(solution.y))
    if not y.size or not np.any(y > 0):
        return "no dual information"
    weight = {cls: float(np.sum(y[rows])) for cls, rows in model.rows.items() if rows}
    total = sum(weight.values())
    ranked = sorted(weight.items(), key=lambda kv: -kv[1])
    return ", ".join(f"{cls} {w / total:.0%}" for cls, w in ranked if w > 0.01 * total)


def project_boxes(network: Network, V: np.ndarray, p_gen: np.ndarray, q_gen: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip voltage magnitudes and generation into their boxes.

    A rank gap of size ``g`` lets ``|V_k|^2`` drift from ``W_kk`` by up to
    ``g``; committed setpoints are pulled back onto the feasible box (angles
    kept).  The move is of the order of the gap.
    """
    mag = np.abs(V)
    lo = np.array([b.v_min for b in network.buses])
    hi = np.array([b.v_max for b in network.buses])
    clipped = np.clip(mag, lo, hi)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(mag > 0, clipped / mag, 1.0)
    V = np.where(mag > 0, V * scale, clipped.astype(complex))
    gens = network.generators
    p = np.clip(p_gen, [g.p_min for g in gens], [g.p_max for g in gens])
    q = np.clip(q_gen, [g.q_min for g in gens], [g.q_max for g in gens])
    return V, p, q
