"""Trace CSVs for online and offline runs.

Every CSV has a fixed header and is written atomically.  Wall-clock data
is kept out of the traces so identical inputs give identical bytes; it goes
to ``metadata.json``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ONLINE_FIELDS = ("slot", "gen_cost", "charge_cost", "total_cost", "aggregate_charge_kw", "min_v_pu",
                 "max_v_pu", "sdr_rank", "noa_iters", "rank_gap", "solve_ms")
OFFLINE_FIELDS = ("slot", "gen_cost", "charge_cost", "total_cost", "aggregate_charge_kw", "min_v_pu",
                  "max_v_pu", "sdr_rank", "sdr_rank_gap", "noa_iters", "rank_gap", "converged")
COMPARE_FIELDS = ("slot", "online_charge_kw", "offline_charge_kw")
BOUND_ROW = "lower_bound"


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if v == 0.0:
            return "0"
        return f"{v:.12g}"
    return str(x)


def atomic_write(path: str | Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return out.getvalue()


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# online

def online_rows(result, timings: bool = False) -> list:
    rows = []
    for r in result.records:
        mag = np.abs(r.voltages)
        rows.append((r.slot, r.gen_cost, r.charge_cost, r.total_cost, r.aggregate_charge, float(mag.min()),
                     float(mag.max()), r.sdr_rank, r.noa_iters, r.rank_gap,
                     round(r.solve_ms, 3) if timings else None))
    return rows


def write_online(out: Path, result, network, timings: bool = False):
    atomic_write(out / "online_trace.csv", csv_text(ONLINE_FIELDS, online_rows(result, timings)))
    buses = [b.id for b in network.buses]
    atomic_write(out / "online_voltages.csv", csv_text(
        ["slot"] + [f"v_bus{b}" for b in buses],
        ([r.slot] + [float(v) for v in np.abs(r.voltages)] for r in result.records)))
    gens = [g.bus for g in network.generators]
    base = network.base_mva
    atomic_write(out / "online_generation.csv", csv_text(
        ["slot"] + [f"pg_bus{b}_mw" for b in gens],
        ([r.slot] + [float(p) * base for p in r.p_gen] for r in result.records)))


def online_summary(result, scenario, complete: bool, error: str = "") -> dict:
    return {
        "online_scenario_id": scenario.fingerprint(),
        "online_complete": complete,
        "online_slots": len(result.records),
        "online_gen_cost": result.gen_cost,
        "online_charge_cost": result.charge_cost,
        "online_total": result.total,
        "online_admitted": len(result.admitted),
        "online_rejected": len(result.rejected),
        "online_evicted": len(result.evicted),
        "online_min_delivered_kwh": min(result.delivered.values(), default=0.0),
        "online_error": error,
    }


# --------------------------------------------------------------------------
# offline

def offline_rows(res) -> list:
    rows = []
    for s in res.slots:
        mag = np.abs(s.voltages) if s.voltages is not None else None
        rows.append((s.slot, s.gen_cost, s.charge_cost, s.gen_cost + s.charge_cost, s.aggregate_charge,
                     float(mag.min()) if mag is not None else None,
                     float(mag.max()) if mag is not None else None,
                     s.sdr_rank, s.sdr_rank_gap, s.noa_iters, s.rank_gap, s.converged))
    rows.append((BOUND_ROW, None, None, res.bound) + (None,) * (len(OFFLINE_FIELDS) - 4))
    return rows


def write_offline(out: Path, res):
    atomic_write(out / "offline_trace.csv", csv_text(OFFLINE_FIELDS, offline_rows(res)))


def offline_summary(res, scenario) -> dict:
    return {
        "offline_scenario_id": scenario.fingerprint(),
        "offline_method": res.method,
        "offline_bound": res.bound,
        "offline_value": res.value,
        "offline_gen_cost": res.gen_cost,
        "offline_charge_cost": res.charge_cost,
        "offline_iterations": res.iterations,
        "offline_converged": res.converged,
        "offline_rank_one": res.rank_one,
        "offline_min_delivered_kwh": min(res.delivered.values(), default=0.0),
    }


# --------------------------------------------------------------------------
# summary (key,value), merged across commands

def read_summary(path: Path) -> dict:
    if not path.is_file():
        return {}
    return {row["key"]: row["value"] for row in read_csv(path)}


def update_summary(out: Path, values: Mapping, prefix: str):
    path = out / "summary.csv"
    current = {k: v for k, v in read_summary(path).items() if not k.startswith(prefix)}
    current.update({k: fmt(v) for k, v in values.items()})
    order = sorted(current, key=lambda k: (not k.startswith("online_"), not k.startswith("offline_"), k))
    atomic_write(path, csv_text(("key", "value"), ((k, current[k]) for k in order)))


def write_metadata(out: Path, info: Mapping):
    path = out / "metadata.json"
    meta = {}
    if path.is_file():
        try:
            meta = json.loads(path.read_text())
        except ValueError:
            meta = {}
    meta.update(info)
    atomic_write(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def compare_rows(online_load: Sequence[float], offline_load: Sequence[float]) -> list:
    T = max(len(online_load), len(offline_load))
    pad = lambda s: list(s) + [0.0] * (T - len(s))  # noqa: E731
    return [(t + 1, a, b) for t, (a, b) in enumerate(zip(pad(online_load), pad(offline_load)))]
