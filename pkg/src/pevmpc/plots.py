"""Minimal SVG line charts, drawn from the trace CSVs only."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .report import atomic_write, read_csv

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
          "#bcbd22", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def line_chart(x: Sequence[float], series: Mapping[str, Sequence[float]], title: str, xlabel: str,
               ylabel: str) -> str:
    """Polylines on autoscaled axes with fixed margins and a legend."""
    ys = [v for s in series.values() for v in s]
    xlo, xhi = (min(x), max(x)) if x else (0.0, 1.0)
    ylo, yhi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if yhi == ylo:
        pad = abs(yhi) * 0.05 or 1.0
        ylo, yhi = ylo - pad, yhi + pad
    else:
        pad = 0.05 * (yhi - ylo)
        ylo, yhi = ylo - pad, yhi + pad
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - xlo) / (xhi - xlo) * pw

    def py(v):
        return MARGIN["top"] + (1 - (v - ylo) / (yhi - ylo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           f'fill="none" stroke="black"/>']
    for v in _ticks(ylo, yhi):
        y = py(v)
        out.append(f'<line x1="{MARGIN["left"] - 4}" y1="{y:.1f}" x2="{MARGIN["left"]}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.4g}</text>')
    for v in _ticks(xlo, xhi):
        xx = px(v)
        yb = MARGIN["top"] + ph
        out.append(f'<line x1="{xx:.1f}" y1="{yb}" x2="{xx:.1f}" y2="{yb + 4}" stroke="black"/>')
        out.append(f'<text x="{xx:.1f}" y="{yb + 18}" text-anchor="middle">{v:.4g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, s))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{pts}"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = MARGIN["left"] + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _columns(rows: list[dict], skip: str = "slot") -> tuple[list, dict]:
    rows = [r for r in rows if r["slot"].isdigit()]
    x = [int(r["slot"]) for r in rows]
    series = {}
    for key in rows[0].keys() if rows else ():
        if key != skip:
            series[key] = [float(r[key]) if r[key] != "" else float("nan") for r in rows]
    return x, series


def plot_online(out: Path):
    x, gen = _columns(read_csv(out / "online_generation.csv"))
    atomic_write(out / "power.svg", line_chart(
        x, {k.replace("pg_", "").replace("_mw", ""): v for k, v in gen.items()},
        "Generated real power", "slot", "MW"))
    x, volt = _columns(read_csv(out / "online_voltages.csv"))
    atomic_write(out / "voltage.svg", line_chart(
        x, {k.replace("v_", ""): v for k, v in volt.items()}, "Voltage magnitude", "slot", "|V| (p.u.)"))
    trace = read_csv(out / "online_trace.csv")
    x = [int(r["slot"]) for r in trace]
    load = {"online": [float(r["aggregate_charge_kw"]) for r in trace]}
    atomic_write(out / "charging_load.svg", line_chart(x, load, "Aggregate charging load", "slot", "kW"))


def plot_offline(out: Path):
    trace = [r for r in read_csv(out / "offline_trace.csv") if r["slot"].isdigit()]
    x = [int(r["slot"]) for r in trace]
    atomic_write(out / "offline_charging_load.svg", line_chart(
        x, {"offline": [float(r["aggregate_charge_kw"]) for r in trace]},
        "Aggregate charging load (offline)", "slot", "kW"))


def plot_compare(out: Path):
    rows = read_csv(out / "compare_load.csv")
    rows = [r for r in rows if r["slot"].isdigit()]
    x = [int(r["slot"]) for r in rows]
    atomic_write(out / "charging_load.svg", line_chart(
        x, {"online": [float(r["online_charge_kw"]) for r in rows],
            "offline": [float(r["offline_charge_kw"]) for r in rows]},
        "Aggregate charging load", "slot", "kW"))
