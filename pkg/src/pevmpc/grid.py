"""Network model, case-file parsing and per-slot load/price profiles.

Case files are plain text with ``[section]`` headers and whitespace
separated rows; ``#`` starts a comment::

    baseMVA = 100

    [bus]
    # id  Pd(MW)  Qd(MVAr)  Vmin  Vmax
    1     0       0         0.9   1.1

    [gen]
    # bus  Pmin  Pmax  Qmin  Qmax
    [branch]
    # from  to  r  x  angle_limit_deg  [b  ratio]   (b and ratio are ignored)
    [gencost]
    # bus  c2  c1  c0      (cost in $/h for P in MW)

Loads and limits are converted to per unit on ``baseMVA`` at parse time.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_ANGLE_LIMIT = math.pi / 6


class CaseFormatError(ValueError):
    """Raised for malformed or inconsistent case files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float   # p.u.
    q_load: float   # p.u.
    v_min: float
    v_max: float


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float        # series resistance, p.u.
    x: float        # series reactance, p.u.
    theta_max: float

    @property
    def y(self) -> complex:
        """Series admittance, p.u."""
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float    # p.u.
    p_max: float
    q_min: float
    q_max: float
    c2: float = 0.0     # $/h per MW^2
    c1: float = 0.0     # $/h per MW
    c0: float = 0.0     # $/h

    def cost(self, p_pu: float, base_mva: float) -> float:
        """Hourly cost of producing ``p_pu`` (per unit)."""
        p = p_pu * base_mva
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index(self, bus_id: int) -> int:
        """Position of ``bus_id`` in ``buses`` (0-based)."""
        return self._index[bus_id]

    @property
    def gen_set(self) -> tuple[int, ...]:
        return tuple(sorted({g.bus for g in self.generators}))

    @property
    def reference_bus(self) -> int:
        return self.gen_set[0]

    def neighbors(self) -> dict[int, list[tuple[int, complex]]]:
        """Map bus id -> [(neighbour id, admittance), ...] in line order."""
        nb: dict[int, list] = {b.id: [] for b in self.buses}
        for ln in self.lines:
            if ln.from_bus in nb:
                nb[ln.from_bus].append((ln.to_bus, ln.y))
            if ln.to_bus in nb:
                nb[ln.to_bus].append((ln.from_bus, ln.y))
        return nb

    def generators_at(self, bus_id: int) -> list[int]:
        return [g for g, gen in enumerate(self.generators) if gen.bus == bus_id]

    def admittance_matrix(self) -> np.ndarray:
        """Bus admittance matrix from series admittances only."""
        Y = np.zeros((self.n_bus, self.n_bus), dtype=complex)
        for ln in self.lines:
            k, m = self.index(ln.from_bus), self.index(ln.to_bus)
            Y[k, k] += ln.y
            Y[m, m] += ln.y
            Y[k, m] -= ln.y
            Y[m, k] -= ln.y
        return Y

    def with_buses(self, buses: Sequence[Bus]) -> "Network":
        return Network(self.base_mva, tuple(buses), self.lines, self.generators)


def validate(network: Network) -> list[str]:
    """Report every broken invariant; an empty list means the network is valid."""
    problems = []
    ids = [b.id for b in network.buses]
    if len(set(ids)) != len(ids):
        problems.append("duplicate bus ids")
    known = set(ids)
    for b in network.buses:
        if not (0 < b.v_min <= b.v_max):
            problems.append(f"bus {b.id}: voltage limits must satisfy 0 < vmin <= vmax "
                            f"(got {b.v_min}, {b.v_max})")
        if not (math.isfinite(b.p_load) and math.isfinite(b.q_load)):
            problems.append(f"bus {b.id}: non-finite load")
    seen = set()
    for ln in network.lines:
        tag = f"line {ln.from_bus}-{ln.to_bus}"
        if ln.from_bus == ln.to_bus:
            problems.append(f"{tag}: from and to bus are equal")
        for end in (ln.from_bus, ln.to_bus):
            if end not in known:
                problems.append(f"{tag}: bus {end} does not exist")
        key = frozenset((ln.from_bus, ln.to_bus))
        if key in seen:
            problems.append(f"{tag}: duplicate line")
        seen.add(key)
        if (ln.r == 0 and ln.x == 0) or not (math.isfinite(ln.r) and math.isfinite(ln.x)):
            problems.append(f"{tag}: impedance must be finite and nonzero")
        if not (0 < ln.theta_max < math.pi / 2):
            problems.append(f"{tag}: angle limit must lie in (0, pi/2)")
    for g in network.generators:
        if g.bus not in known:
            problems.append(f"generator at bus {g.bus}: bus does not exist")
        if g.p_min > g.p_max:
            problems.append(f"generator at bus {g.bus}: pmin > pmax")
        if g.q_min > g.q_max:
            problems.append(f"generator at bus {g.bus}: qmin > qmax")
        if g.c2 < 0:
            problems.append(f"generator at bus {g.bus}: negative quadratic cost")
    if not network.generators:
        problems.append("network has no generators")
    if network.buses and not _connected(network):
        problems.append("network graph is not connected")
    return problems


def _connected(network: Network) -> bool:
    nb = network.neighbors()
    start = network.buses[0].id
    seen = {start}
    todo = deque([start])
    while todo:
        k = todo.popleft()
        for m, _ in nb.get(k, ()):
            if m in nb and m not in seen:
                seen.add(m)
                todo.append(m)
    return len(seen) == len(nb)


_SECTIONS = {"bus": 5, "gen": 5, "branch": 5, "gencost": 4}


def parse_case(text: str) -> Network:
    """Parse case-file text into a validated :class:`Network`."""
    base = None
    section = None
    rows: dict[str, list[tuple[int, list[float]]]] = {k: [] for k in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise CaseFormatError(f"unknown section [{section}]", lineno)
            continue
        if line.lower().startswith("basemva"):
            try:
                base = float(line.split("=", 1)[1] if "=" in line else line.split()[1])
            except (IndexError, ValueError):
                raise CaseFormatError("malformed baseMVA line", lineno) from None
            if not base > 0:
                raise CaseFormatError("baseMVA must be positive", lineno)
            continue
        if section is None:
            raise CaseFormatError("data row outside any section", lineno)
        try:
            vals = [float(v) for v in line.split()]
        except ValueError:
            raise CaseFormatError(f"non-numeric value in [{section}] row", lineno) from None
        need = _SECTIONS[section]
        if len(vals) < need or (section != "branch" and len(vals) > need) or len(vals) > 7:
            raise CaseFormatError(f"[{section}] row needs {need} columns, got {len(vals)}", lineno)
        if not all(math.isfinite(v) for v in vals):
            raise CaseFormatError("non-finite value", lineno)
        rows[section].append((lineno, vals))
    if base is None:
        raise CaseFormatError("missing baseMVA")
    if not rows["bus"]:
        raise CaseFormatError("no [bus] rows")

    buses = []
    bus_line = {}
    for lineno, (bid, pd, qd, vmin, vmax) in rows["bus"]:
        if bid != int(bid) or bid < 1:
            raise CaseFormatError("bus id must be a positive integer", lineno)
        if int(bid) in bus_line:
            raise CaseFormatError(f"duplicate bus {int(bid)}", lineno)
        if not (0 < vmin <= vmax):
            raise CaseFormatError(f"bus {int(bid)}: voltage limits out of order", lineno)
        bus_line[int(bid)] = lineno
        buses.append(Bus(int(bid), pd / base, qd / base, vmin, vmax))

    lines = []
    seen = {}
    for lineno, vals in rows["branch"]:
        f, t, r, x, ang = vals[:5]
        f, t = int(f), int(t)
        for end in (f, t):
            if end not in bus_line:
                raise CaseFormatError(f"branch refers to unknown bus {end}", lineno)
        if f == t:
            raise CaseFormatError("branch connects a bus to itself", lineno)
        key = frozenset((f, t))
        if key in seen:
            raise CaseFormatError(f"duplicate line {f}-{t} (first at line {seen[key]})", lineno)
        seen[key] = lineno
        if r == 0 and x == 0:
            raise CaseFormatError("branch impedance is zero", lineno)
        theta = DEFAULT_ANGLE_LIMIT if ang == 0 else math.radians(abs(ang))
        if not (0 < theta < math.pi / 2):
            raise CaseFormatError("angle limit must lie in (0, 90) degrees", lineno)
        lines.append(Line(f, t, r, x, theta))

    costs = {}
    for lineno, (bid, c2, c1, c0) in rows["gencost"]:
        if int(bid) in costs:
            raise CaseFormatError(f"duplicate gencost for bus {int(bid)}", lineno)
        if c2 < 0:
            raise CaseFormatError("quadratic cost coefficient must be >= 0", lineno)
        costs[int(bid)] = (c2, c1, c0, lineno)

    gens = []
    for lineno, (bid, pmin, pmax, qmin, qmax) in rows["gen"]:
        bid = int(bid)
        if bid not in bus_line:
            raise CaseFormatError(f"generator at unknown bus {bid}", lineno)
        if any(g.bus == bid for g in gens):
            raise CaseFormatError(f"second generator at bus {bid}", lineno)
        if pmin > pmax:
            raise CaseFormatError(f"generator at bus {bid}: Pmin > Pmax", lineno)
        if qmin > qmax:
            raise CaseFormatError(f"generator at bus {bid}: Qmin > Qmax", lineno)
        c2, c1, c0, _ = costs.pop(bid, (0.0, 0.0, 0.0, None))
        gens.append(Generator(bid, pmin / base, pmax / base, qmin / base, qmax / base, c2, c1, c0))
    for bid, (*_, lineno) in costs.items():
        raise CaseFormatError(f"gencost for bus {bid} without a generator", lineno)

    net = Network(base, tuple(buses), tuple(lines), tuple(gens))
    problems = validate(net)
    if problems:
        raise CaseFormatError("; ".join(problems))
    return net


def load_case(path: str | Path) -> Network:
    return parse_case(Path(path).read_text())


def serialize_case(network: Network) -> str:
    """Write ``network`` back in the case-file format (inverse of :func:`parse_case`)."""
    base = network.base_mva
    out = [f"baseMVA = {base!r}", "", "[bus]"]
    for b in network.buses:
        out.append(f"{b.id} {b.p_load * base!r} {b.q_load * base!r} {b.v_min!r} {b.v_max!r}")
    out += ["", "[gen]"]
    for g in network.generators:
        out.append(f"{g.bus} {g.p_min * base!r} {g.p_max * base!r} {g.q_min * base!r} {g.q_max * base!r}")
    out += ["", "[branch]"]
    for ln in network.lines:
        out.append(f"{ln.from_bus} {ln.to_bus} {ln.r!r} {ln.x!r} {math.degrees(ln.theta_max)!r}")
    out += ["", "[gencost]"]
    for g in network.generators:
        out.append(f"{g.bus} {g.c2!r} {g.c1!r} {g.c0!r}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# profiles

@dataclass(frozen=True)
class Profile:
    """Per-slot series: a load multiplier or a charging price ($/kWh)."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("profile is empty")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("profile values must be finite and nonnegative")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, t: int) -> float:
        """Value at slot ``t`` (1-based)."""
        if not 1 <= t <= len(self.values):
            raise IndexError(f"slot {t} outside 1..{len(self.values)}")
        return self.values[t - 1]

    @classmethod
    def constant(cls, value: float, T: int) -> "Profile":
        return cls((value,) * T)


def parse_profile(text: str) -> Profile:
    """Read a ``slot,value`` CSV with slots numbered 1..T."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["slot", "value"]:
        raise ValueError("profile CSV must have header 'slot,value'")
    values = []
    for n, row in enumerate(reader, start=1):
        try:
            slot = int(row["slot"])
            val = float(row["value"])
        except (TypeError, ValueError):
            raise ValueError(f"profile row {n}: malformed") from None
        if slot != n:
            raise ValueError(f"profile row {n}: expected slot {n}, got {slot}")
        values.append(val)
    return Profile(tuple(values))


def load_profile(path: str | Path) -> Profile:
    return parse_profile(Path(path).read_text())


def write_profile(profile: Profile) -> str:
    return "slot,value\n" + "".join(f"{t},{v!r}\n" for t, v in enumerate(profile.values, start=1))


def scale_load(base: float, profile: Profile, T: int) -> np.ndarray:
    """Spread a nominal load over ``T`` slots following ``profile``.

    Slot ``t`` gets ``l(t) * base * T / sum(l)``, so the mean over the
    horizon equals ``base``.
    """
    if len(profile) != T:
        raise ValueError(f"profile has {len(profile)} slots, expected {T}")
    lvals = np.asarray(profile.values)
    total = lvals.sum()
    if total <= 0:
        raise ValueError("load profile sums to zero")
    return lvals * base * T / total


def slot_loads(network: Network, profile: Profile, T: int) -> np.ndarray:
    """(T, n_bus) complex per-unit loads ``P_l + jQ_l``.

    Reactive load follows the same multiplier as real load.
    """
    p = np.array([scale_load(b.p_load, profile, T) for b in network.buses]).T
    q = np.array([scale_load(b.q_load, profile, T) for b in network.buses]).T
    return p + 1j * q
