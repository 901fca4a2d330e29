"""Batch command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure or
non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ddp import bounds_report, run_algorithm1
from .dp import Grid, extract_policy_trajectory, linear_terminal, solve_dp
from .io import DataError, bundled_network_path, load_network, resolve_prices, write_csv
from .linearize import delta_schedule, multicell_binary_count
from .lp import SolverError
from .model import ModelError, PriceSeries, with_water_values
from .sim import Method, SimConfig, run_simulation, sweep, write_summaries

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _common(p: argparse.ArgumentParser, horizon=True):
    p.add_argument("--network", default=None, help="network JSON (default: bundled two_reservoir)")
    p.add_argument("--prices", default=None, help="'seed:N' for synthetic prices or a CSV path")
    p.add_argument("--seed", type=int, default=1, help="seed used when --prices is not given")
    if horizon:
        p.add_argument("--T", type=int, default=48, help="horizon in hours")
    p.add_argument("--grid", type=int, default=32, help="level grid points")
    p.add_argument("--flow-grid", type=int, default=32, help="flow samples per device")
    p.add_argument("--tight", action="store_true", help="tightened envelope bounds")
    p.add_argument("--out", default=None, help="output file (CSV commands)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hydroddp", description="Split-horizon DDP for pumped-hydro scheduling.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="one split-horizon solve")
    _common(s)
    s.add_argument("--T1", type=int, default=12)
    s.add_argument("--max-iter", type=int, default=25)
    s.add_argument("--log", default=None, help="write the iteration log (JSON lines) here")

    s = sub.add_parser("simulate", help="shrinking-horizon simulation")
    _common(s)
    s.add_argument("--T1", type=int, default=12)
    s.add_argument("--TC", type=int, default=12)
    s.add_argument("--method", choices=[m.value for m in Method], default=None)
    s.add_argument("--budget", type=float, default=None, help="MILP seconds per re-solve")

    s = sub.add_parser("sweep", help="simulations over T1 x T_C x bound mode")
    _common(s)
    s.add_argument("--T1s", type=_ints, default=[0, 6, 12, 24, 48])
    s.add_argument("--TCs", type=_ints, default=[12])
    s.add_argument("--modes", default="static,tightened")

    s = sub.add_parser("oracle", help="full-horizon grid DP")
    _common(s)

    s = sub.add_parser("multicell", help="shrinking-horizon simulation with the multi-cell MILP")
    _common(s)
    s.add_argument("--TC", type=int, default=12)
    s.add_argument("--nv", type=int, default=2)
    s.add_argument("--nl", type=int, default=2)
    s.add_argument("--budget", type=float, default=10.0, help="MILP seconds per re-solve")

    s = sub.add_parser("bounds", help="per-step envelope error bound table")
    _common(s)
    s.add_argument("--T1", type=int, default=0)

    s = sub.add_parser("emit-plots", help="CSV series for the objective, timing and Pareto plots")
    _common(s, horizon=False)
    s.add_argument("--T", type=int, default=480)
    s.add_argument("--T1s", type=_ints, default=[0, 6, 12, 24, 48])
    s.add_argument("--TCs", type=_ints, default=[6, 12, 24])
    s.add_argument("--days", type=_ints, default=[2, 5, 10, 15, 20])
    s.add_argument("--budgets", default="1,1.5,2,4", help="multi-cell budgets as multiples of split time")
    s.add_argument("--out-dir", default="plots")
    return ap


def _setup(args):
    net = load_network(args.network or bundled_network_path("two_reservoir"))
    spec = args.prices or f"seed:{args.seed}"
    T = getattr(args, "T", None)
    prices, seed = resolve_prices(spec, T)
    prices = with_water_values(net, prices)
    grid = Grid(args.grid, args.flow_grid)
    return net, prices, grid, seed if seed is not None else args.seed


def _emit(obj: dict):
    print(json.dumps({"version": __version__, **obj}, default=float))


def _mapper(jobs: int):
    if jobs <= 1:
        return map, None
    pool = ProcessPoolExecutor(max_workers=jobs)
    return pool.map, pool


def cmd_solve(args) -> int:
    net, prices, grid, seed = _setup(args)
    stream = open(args.log, "w") if args.log else None
    try:
        res = run_algorithm1(net, prices, args.T1, args.T, grid, max_iter=args.max_iter,
                             tightened=args.tight, log_stream=stream)
    finally:
        if stream:
            stream.close()
    rep = bounds_report(res, net, prices)
    _emit({"command": "solve", "seed": seed, **res.summary(), "bounds": rep.as_dict()})
    return EXIT_OK if res.converged else EXIT_SOLVER


def cmd_simulate(args, method=None) -> int:
    net, prices, grid, seed = _setup(args)
    method = method or args.method or (Method.PURE_LP if args.T1 == 0 else Method.SPLIT_DDP)
    cfg = SimConfig(args.T, getattr(args, "T1", 0), args.TC, method, grid,
                    "tightened" if args.tight else "static", seed,
                    n_v=getattr(args, "nv", 2), n_l=getattr(args, "nl", 2),
                    time_budget=getattr(args, "budget", None))
    r = run_simulation(cfg, net, prices)
    if args.out:
        write_summaries(args.out, [r], seed, __version__)
    _emit({"command": "simulate", "seed": seed, **r.summary(), "failed_at": r.failed_at,
           "max_divergence": max(r.divergence, default=0.0)})
    return EXIT_OK if r.ok else EXIT_SOLVER


def cmd_sweep(args) -> int:
    net, prices, grid, seed = _setup(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    base = SimConfig(args.T, 1, min(args.TCs), Method.SPLIT_DDP, grid, "static", seed)
    mapper, pool = _mapper(args.jobs)
    try:
        cells = sweep(base, net, prices, args.T1s, args.TCs, modes, mapper)
    finally:
        if pool:
            pool.shutdown()
    write_summaries(args.out or sys.stdout, [c.result for c in cells], seed, __version__)
    knees = [{"T1": c.T1, "T_C": c.T_C, "bound_mode": c.bound_mode} for c in cells if c.knee]
    print(json.dumps({"version": __version__, "knee_cells": knees}), file=sys.stderr)
    return EXIT_OK if all(c.result.ok for c in cells) else EXIT_SOLVER


def cmd_oracle(args) -> int:
    net, prices, grid, seed = _setup(args)
    t0 = time.perf_counter()
    table, value = solve_dp(net, prices, 0, args.T, linear_terminal(prices.terminal_values), grid)
    roll = extract_policy_trajectory(table, net.initial_levels, net, prices)
    _emit({"command": "oracle", "seed": seed, "T": args.T, "value": value,
           "objective": roll.trajectory.objective, "max_clip": float(roll.clip_distance.max(initial=0)),
           "wall_ms": 1000 * (time.perf_counter() - t0)})
    return EXIT_OK


def cmd_bounds(args) -> int:
    net, prices, grid, seed = _setup(args)
    d = delta_schedule(net, prices, args.T1, args.T, args.tight)
    cum = np.cumsum(d)
    rows = [[args.T1 + k, repr(float(v)), repr(float(c))] for k, (v, c) in enumerate(zip(d, cum))]
    write_csv(args.out or sys.stdout, ["t", "delta_t", "cumulative"], rows, seed)
    print(json.dumps({"version": __version__, "sum_delta": float(d.sum())}), file=sys.stderr)
    return EXIT_OK


def cmd_emit_plots(args) -> int:
    """Write CSV series: objective vs T1 per bound mode, objective vs T1 per
    T_C, wall time vs horizon, and time vs objective for split vs
    multi-cell."""
    net, prices, grid, seed = _setup(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mapper, pool = _mapper(args.jobs)
    try:
        base = SimConfig(args.T, 1, 12, Method.SPLIT_DDP, grid, "static", seed)
        cells = sweep(base, net, prices, args.T1s, [12], ["static", "tightened"], mapper)
        write_csv(out / "objective_vs_T1.csv", ["bound_mode", "T1", "realized_objective"],
                  [[c.bound_mode, c.T1, c.result.objective] for c in cells], seed)
        cells = sweep(base, net, prices, args.T1s, args.TCs, ["static"], mapper)
        write_csv(out / "objective_vs_T1_per_TC.csv", ["T_C", "T1", "realized_objective", "knee"],
                  [[c.T_C, c.T1, c.result.objective, int(c.knee)] for c in cells], seed)
    finally:
        if pool:
            pool.shutdown()
    rows = []
    for days in args.days:
        T = 24 * days
        pr = with_water_values(net, PriceSeries(prices.prices[:T]) if prices.T >= T
                               else resolve_prices(f"seed:{seed}", T)[0])
        t0 = time.perf_counter()
        run_algorithm1(net, pr, 12, T, grid)
        t_split = time.perf_counter() - t0
        t0 = time.perf_counter()
        solve_dp(net, pr, 0, T, linear_terminal(pr.terminal_values), grid)
        rows.append([T, t_split, time.perf_counter() - t0])
    write_csv(out / "wall_time_vs_T.csv", ["T", "split_wall_s", "dp_oracle_wall_s"], rows, seed)
    split = run_simulation(SimConfig(args.T, 12, 12, Method.SPLIT_DDP, grid, "static", seed), net, prices)
    per = float(np.mean(split.wall_s))
    rows = [["split_ddp", per, split.objective]]
    for f in (float(x) for x in args.budgets.split(",")):
        mc = run_simulation(SimConfig(args.T, 0, 12, Method.MULTICELL, grid, "static", seed,
                                      time_budget=f * per), net, prices)
        rows.append(["multicell", f * per, mc.objective if mc.ok else float("nan")])
    write_csv(out / "pareto_time_vs_objective.csv", ["method", "budget_s", "realized_objective"], rows, seed)
    _emit({"command": "emit-plots", "seed": seed, "out_dir": str(out),
           "multicell_binaries_20d": multicell_binary_count(4, 2, 480)})
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "sweep": cmd_sweep, "oracle": cmd_oracle,
            "multicell": lambda a: cmd_simulate(a, Method.MULTICELL), "bounds": cmd_bounds,
            "emit-plots": cmd_emit_plots}


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (DataError, ModelError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
