"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 solver failure
(including infeasibility).  Traces already produced are kept on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .grid import CaseFormatError, load_case
from .mpc import MpcConfig, MpcError, MpcResult, run
from .noa import NoaError, PenaltyConfig, default_mu, repair_slot
from .plots import plot_compare, plot_offline, plot_online
from .relax import (RANK_TOL, build_window_sdr, extract_slot, infeasibility_report, is_rank_one, project_boxes,
                    recover_voltage)
from .report import (COMPARE_FIELDS, atomic_write, compare_rows, csv_text, fmt, offline_summary, online_summary,
                     read_csv, read_summary, update_summary, write_metadata, write_offline, write_online)
from .scenario import (OfflineError, ScenarioError, bundled_scenario_path, load_scenario, run_offline,
                       split_uniform, build_fleet, FleetDefaults, write_scenario)
from .sdp import OPTIMAL, SolverOptions, solve

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2

log = logging.getLogger("pevmpc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, scenario: bool = True):
    if scenario:
        p.add_argument("--scenario", type=Path, help="scenario file (default: bundled 9-bus scenario)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--mu", type=float, help="penalty weight (default 10 up to 30 buses, else 100)")
    p.add_argument("--eps", type=float, default=RANK_TOL, help="rank-gap tolerance")
    p.add_argument("--seed", type=int, help="override the fleet seed")
    p.add_argument("--plots", action="store_true", help="write SVG plots")
    p.add_argument("--max-iter", type=int, help="interior-point iteration limit")
    p.add_argument("--noa-max-iter", type=int, default=50, help="penalty iteration limit")
    p.add_argument("--gap-tol", type=float, help="solver relative duality gap tolerance")
    p.add_argument("--feas-tol", type=float, help="solver feasibility tolerance")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pevmpc", description="Joint PEV charging and AC OPF via semidefinite relaxation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate-online", help="receding-horizon run")
    _common(p)
    p.add_argument("--timings", action="store_true",
                   help="fill the solve_ms column (makes the trace run-dependent)")

    p = sub.add_parser("simulate-offline", help="full-horizon lower bound and repair")
    _common(p)
    p.add_argument("--method", default="joint", help="joint or dnoa")
    p.add_argument("--workers", type=int, help="threads for dnoa")

    p = sub.add_parser("compare", help="offline/online ratio from traces in --out, or from fresh runs")
    _common(p)
    p.add_argument("--method", default="joint", help="offline method when running")
    p.add_argument("--run", action="store_true", help="run both simulations first")

    p = sub.add_parser("solve-opf", help="single-slot relaxation plus rank repair")
    _common(p, scenario=False)
    p.add_argument("--case", type=Path, help="case file")
    p.add_argument("--scenario", type=Path, help="take network and loads of --slot from a scenario")
    p.add_argument("--slot", type=int, default=1)
    p.add_argument("--load-scale", type=float, default=1.0, help="multiplier on the case loads")

    p = sub.add_parser("generate-scenario", help="write a self-contained scenario directory")
    _common(p)
    p.add_argument("--count", type=int, help="number of vehicles (spread over generator buses)")
    return ap


# --------------------------------------------------------------------------

def _solver(args) -> SolverOptions:
    kw = {}
    if args.max_iter is not None:
        kw["max_iter"] = args.max_iter
    if args.gap_tol is not None:
        kw["gap_tol"] = args.gap_tol
    if args.feas_tol is not None:
        kw["feas_tol"] = args.feas_tol
    return SolverOptions(**kw)


def _penalty(args, network) -> PenaltyConfig:
    mu = args.mu if args.mu is not None else default_mu(network)
    sub = _solver(args)
    noa_solver = dataclasses.replace(sub, gap_tol=min(sub.gap_tol, 1e-9), feas_tol=min(sub.feas_tol, 1e-9))
    return PenaltyConfig(mu=mu, eps=args.eps, max_iter=args.noa_max_iter, solver=noa_solver)


def _scenario(args):
    return load_scenario(args.scenario or bundled_scenario_path(), seed=args.seed)


def _online(args, sc, out: Path) -> int:
    cfg = MpcConfig(penalty=_penalty(args, sc.network), solver=_solver(args))
    started = time.time()
    code, error = EXIT_OK, ""
    try:
        result = run(sc, cfg)
    except MpcError as exc:
        result = exc.partial or MpcResult()
        code, error = EXIT_SOLVER, str(exc)
        print(f"error: {exc}", file=sys.stderr)
    write_online(out, result, sc.network, timings=getattr(args, "timings", False))
    update_summary(out, online_summary(result, sc, code == EXIT_OK, error), "online_")
    write_metadata(out, {"online": {
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_s": round(time.time() - started, 3),
        "solve_ms": [round(r.solve_ms, 3) for r in result.records],
        "rejected": [list(r) for r in result.rejected], "evicted": [list(e) for e in result.evicted],
        "version": __version__, "python": platform.python_version()}})
    if args.plots and result.records:
        plot_online(out)
    if code == EXIT_OK:
        print(f"online total {fmt(result.total)} over {len(result.records)} slots")
    return code


def _offline(args, sc, out: Path) -> int:
    if args.method not in ("joint", "dnoa"):
        raise UsageError(f"invalid method {args.method!r} (expected joint or dnoa)")
    started = time.time()
    try:
        res = run_offline(sc, args.method, _penalty(args, sc.network), _solver(args),
                          workers=getattr(args, "workers", None))
    except (OfflineError, NoaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_offline(out, res)
    update_summary(out, offline_summary(res, sc), "offline_")
    write_metadata(out, {"offline": {"wall_s": round(time.time() - started, 3), "method": res.method,
                                     "version": __version__}})
    if args.plots:
        plot_offline(out)
    print(f"offline bound {fmt(res.bound)} value {fmt(res.value)} ({res.method}, {res.iterations} iterations)")
    return EXIT_OK


def cmd_simulate_online(args) -> int:
    return _online(args, _scenario(args), args.out)


def cmd_simulate_offline(args) -> int:
    return _offline(args, _scenario(args), args.out)


def cmd_compare(args) -> int:
    out = args.out
    if args.run:
        sc = _scenario(args)
        code = _online(args, sc, out)
        if code != EXIT_OK:
            return code
        code = _offline(args, sc, out)
        if code != EXIT_OK:
            return code
    summary = read_summary(out / "summary.csv")
    for kind in ("online", "offline"):
        if not (out / f"{kind}_trace.csv").is_file() or f"{kind}_scenario_id" not in summary:
            raise UsageError(f"{kind} trace missing in {out} (run simulate-{kind} first or pass --run)")
    if summary.get("online_complete") != "1":
        raise UsageError("online trace is incomplete")
    if summary["online_scenario_id"] != summary["offline_scenario_id"]:
        raise UsageError("online and offline traces come from different scenarios")
    on_total = float(summary["online_total"])
    off_value = float(summary["offline_value"])
    off_bound = float(summary["offline_bound"])
    on_load = [float(r["aggregate_charge_kw"]) for r in read_csv(out / "online_trace.csv")]
    off_load = [float(r["aggregate_charge_kw"]) for r in read_csv(out / "offline_trace.csv")
                if r["slot"].isdigit()]
    ratio = off_value / on_total if on_total else 1.0
    flags = []
    scale = max(1.0, abs(on_total))
    if off_bound > off_value + 1e-6 * scale:
        flags.append("bound_above_value")
    if off_value > on_total + 1e-6 * scale:
        flags.append("offline_above_online")
    atomic_write(out / "compare.csv", csv_text(("key", "value"), [
        ("online_total", on_total), ("offline_value", off_value), ("offline_bound", off_bound),
        ("ratio", ratio), ("bound_ratio", off_bound / on_total if on_total else 1.0),
        ("flags", ";".join(flags))]))
    atomic_write(out / "compare_load.csv", csv_text(COMPARE_FIELDS, compare_rows(on_load, off_load)))
    if args.plots:
        plot_compare(out)
    print(f"ratio {ratio:.6f}")
    for f in flags:
        print(f"warning: {f}", file=sys.stderr)
    return EXIT_OK


def cmd_solve_opf(args) -> int:
    if args.scenario is not None:
        sc = _scenario(args)
        if not 1 <= args.slot <= sc.T:
            raise UsageError(f"--slot must lie in 1..{sc.T}")
        net, load, price = sc.network, sc.load_at(args.slot) * args.load_scale, sc.price_at(args.slot)
    elif args.case is not None:
        if not args.case.is_file():
            raise UsageError(f"case file not found: {args.case}")
        net = load_case(args.case)
        load = np.array([b.p_load + 1j * b.q_load for b in net.buses]) * args.load_scale
        price = 0.0
    else:
        raise UsageError("solve-opf needs --case or --scenario")
    t = args.slot if args.scenario is not None else 1
    pen = _penalty(args, net)
    prob, model = build_window_sdr(net, (t, t), {t: load}, {t: price}, (), dt=1.0)
    sol = solve(prob, _solver(args))
    if sol.status != OPTIMAL:
        detail = infeasibility_report(model, sol) if sol.status == "infeasible" else sol.message
        print(f"status={sol.status}\ndiagnostic={detail}")
        return EXIT_SOLVER
    rec = extract_slot(model, sol, t, pen.eps)
    gap0 = rec.rank_gap
    iters = 0
    converged = True
    if not is_rank_one(rec.W):
        try:
            rec, trace = repair_slot(net, t, load, price, {}, {}, rec, pen, dt=1.0)
        except NoaError as exc:
            print(f"status=failed\ndiagnostic={exc}")
            return EXIT_SOLVER
        iters, converged = trace.iterations, trace.converged
    V, p, q = project_boxes(net, recover_voltage(rec.W, net.index(net.reference_bus)), rec.p_gen, rec.q_gen)
    lines = [("status", "optimal" if converged else "not_converged"),
             ("objective", rec.gen_cost + rec.charge_cost), ("sdr_objective", model.total_cost(sol)[2]),
             ("rank_gap_sdr", gap0), ("rank_gap", rec.rank_gap), ("noa_iterations", iters),
             ("flow_residual", rec.flow_residual)]
    for k, b in enumerate(net.buses):
        lines.append((f"v{b.id}_mag", abs(V[k])))
        lines.append((f"v{b.id}_deg", float(np.degrees(np.angle(V[k])))))
    for g, gen in enumerate(net.generators):
        lines.append((f"pg{gen.bus}_mw", p[g] * net.base_mva))
        lines.append((f"qg{gen.bus}_mvar", q[g] * net.base_mva))
    for k, v in lines:
        print(f"{k}={fmt(v)}")
    return EXIT_OK if converged else EXIT_SOLVER


def cmd_generate_scenario(args) -> int:
    sc = _scenario(args)
    if args.count is not None:
        if args.count < 0:
            raise UsageError("--count must be >= 0")
        seed = args.seed if args.seed is not None else (sc.seed or 0)
        base = sc.pevs[0] if sc.pevs else None
        defaults = FleetDefaults() if base is None else FleetDefaults(base.capacity, base.soc0, base.p_max,
                                                                      base.efficiency)
        pevs = build_fleet(seed, split_uniform(args.count, sc.network.gen_set), defaults, sc.T, sc.dt)
        sc = dataclasses.replace(sc, pevs=tuple(pevs), seed=seed)
    path = write_scenario(sc, args.out)
    print(f"wrote {path} ({len(sc.pevs)} vehicles, seed {sc.seed})")
    return EXIT_OK


COMMANDS = {
    "simulate-online": cmd_simulate_online,
    "simulate-offline": cmd_simulate_offline,
    "compare": cmd_compare,
    "solve-opf": cmd_solve_opf,
    "generate-scenario": cmd_generate_scenario,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ScenarioError, CaseFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # option values rejected by constructors (e.g. mu <= 0)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
