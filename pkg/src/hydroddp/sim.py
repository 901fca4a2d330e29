"""Shrinking-horizon simulation: plan over the remaining horizon, apply the
first ``T_C`` hours on the exact plant, advance and re-plan."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .ddp import run_algorithm1
from .dp import Grid, extract_policy_trajectory, linear_terminal, solve_dp
from .linearize import build_horizon_problem
from .lp import SolverError, solve_lp, solve_milp
from .model import PriceSeries, ReservoirNetwork, Trajectory, exact_objective, exact_stage_costs, simulate

log = logging.getLogger(__name__)


class Method(str, Enum):
    SPLIT_DDP = "split_ddp"
    PURE_LP = "pure_lp"
    DP_ORACLE = "dp_oracle"
    MULTICELL = "multicell"


@dataclass(frozen=True)
class SimConfig:
    T: int
    T1: int
    T_C: int
    method: Method = Method.SPLIT_DDP
    grid: Grid = Grid()
    bound_mode: str = "static"
    seed: int = 0
    n_v: int = 2
    n_l: int = 2
    time_budget: float | None = None  # seconds per re-solve (MULTICELL)
    max_iter: int = 25

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 1 <= self.T_C <= self.T:
            raise ValueError("need 1 <= T_C <= T")
        if self.T1 < 0:
            raise ValueError("T1 must be nonnegative")
        if self.T1 == 0 and self.method in (Method.SPLIT_DDP,):
            raise ValueError("T1 = 0 is the pure LP method")
        if self.bound_mode not in ("static", "tightened"):
            raise ValueError(f"bound_mode must be static or tightened, got {self.bound_mode!r}")

    @property
    def tightened(self) -> bool:
        return self.bound_mode == "tightened"


@dataclass
class SimResult:
    config: SimConfig
    trajectory: Trajectory
    objective: float
    wall_s: list = field(default_factory=list)
    divergence: list = field(default_factory=list)  # max |planned - realized| level per re-solve
    cuts: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    budgets: list = field(default_factory=list)  # MULTICELL seconds granted per re-solve
    fallbacks: int = 0  # MULTICELL re-solves without an incumbent
    failed_at: int | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.failed_at is None

    def summary(self) -> dict:
        c = self.config
        return {"method": c.method.value, "T1": c.T1, "T_C": c.T_C, "bound_mode": c.bound_mode,
                "realized_objective": self.objective, "total_wall_ms": 1000 * sum(self.wall_s),
                "resolves": len(self.wall_s), "cuts_total": int(sum(self.cuts))}


@dataclass
class Plan:
    levels: np.ndarray
    flows: np.ndarray
    cuts: int = 0
    iterations: int = 1
    fallback: bool = False


def plan(cfg: SimConfig, network: ReservoirNetwork, window: PriceSeries, start,
         budget: float | None = None) -> Plan:
    """One solve over the whole of ``window`` from ``start``.

    A multi-cell MILP that finds no incumbent within ``budget`` falls back to
    the schedule of its LP relaxation, which is feasible for the exact model
    because every envelope variable is auxiliary.
    """
    H = window.T
    if cfg.method == Method.SPLIT_DDP:
        res = run_algorithm1(network, window, min(cfg.T1, H), H, cfg.grid, max_iter=cfg.max_iter,
                             tightened=cfg.tightened, start_levels=start)
        if not res.converged:
            raise SolverError(f"split-horizon loop did not converge in {res.iterations} iterations")
        return Plan(res.trajectory.levels, res.trajectory.flows, len(res.cuts), res.iterations)
    if cfg.method == Method.DP_ORACLE:
        table, _ = solve_dp(network, window, 0, H, linear_terminal(window.terminal_values), cfg.grid, start)
        roll = extract_policy_trajectory(table, start, network, window)
        return Plan(roll.trajectory.levels, roll.trajectory.flows)
    cells = (1, 1) if cfg.method == Method.PURE_LP else (cfg.n_v, cfg.n_l)
    prob, lay = build_horizon_problem(network, window, start, tightened=cfg.tightened,
                                      anchor_levels=start, anchor_offset=0, cells=cells,
                                      prune=cfg.method == Method.PURE_LP)
    if cfg.method == Method.PURE_LP:
        sol = solve_lp(prob, "highs")
        if not sol.optimal:
            raise SolverError(f"pure LP ended with status {sol.status.value}")
        x = sol.x
    else:
        if budget is None:
            budget = cfg.time_budget if cfg.time_budget is not None else 60.0
        r = solve_milp(prob, gap_tol=1e-6, time_limit=budget, backend="highs")
        if r.solution.x is None:
            relax = solve_lp(prob.lp, "highs")
            if not relax.optimal:
                raise SolverError(f"multi-cell relaxation ended with status {relax.status.value}")
            return Plan(relax.x[lay.level_idx], relax.x[lay.flow_idx], fallback=True)
        x = r.solution.x
    return Plan(x[lay.level_idx], x[lay.flow_idx])


def matched_budget(cfg: SimConfig, network: ReservoirNetwork, window: PriceSeries, start) -> float:
    """Wall time of a split-horizon solve of the same window and state
    (first stage ``cfg.T1``, or 12 h when the config has none)."""
    ref = replace(cfg, method=Method.SPLIT_DDP, T1=cfg.T1 if cfg.T1 > 0 else 12)
    t0 = time.perf_counter()
    plan(ref, network, window, start)
    return time.perf_counter() - t0


def run_simulation(cfg: SimConfig, network: ReservoirNetwork, prices: PriceSeries,
                   on_resolve: Callable | None = None) -> SimResult:
    """Shrinking-horizon loop.  A solver failure ends the run early; the
    result then holds the realized prefix and ``failed_at`` (resolve index)."""
    if prices.T < cfg.T:
        raise ValueError(f"price series has {prices.T} steps, need {cfg.T}")
    full = PriceSeries(prices.prices[:cfg.T], prices.terminal_values)
    cur = np.asarray(network.initial_levels, dtype=float)
    levels = [cur]
    flows = []
    result = SimResult(cfg, None, math.nan)
    t, k = 0, 0
    while t < cfg.T:
        window = PriceSeries(full.prices[t:], full.terminal_values)
        try:
            budget = None
            if cfg.method == Method.MULTICELL:
                budget = cfg.time_budget if cfg.time_budget is not None else \
                    matched_budget(cfg, network, window, cur)
                result.budgets.append(budget)
            t0 = time.perf_counter()
            p = plan(cfg, network, window, cur, budget)
        except SolverError as e:
            result.failed_at = k
            result.message = str(e)
            log.error("re-solve %d at t=%d failed: %s", k, t, e)
            break
        result.wall_s.append(time.perf_counter() - t0)
        n = min(cfg.T_C, cfg.T - t)
        applied = simulate(cur, p.flows[:n], network)
        applied = np.clip(applied, network.level_min, network.level_max)
        result.divergence.append(float(np.max(np.abs(applied - p.levels[:n + 1]))))
        result.cuts.append(p.cuts)
        result.iterations.append(p.iterations)
        result.fallbacks += p.fallback
        levels.extend(applied[1:])
        flows.extend(p.flows[:n])
        cur = applied[-1]
        if on_resolve is not None:
            on_resolve(k, t, result)
        t += n
        k += 1
    L = np.array(levels)
    F = np.array(flows).reshape(-1, network.n_arcs)
    traj = Trajectory(L, F, math.nan, 0)
    done = PriceSeries(full.prices[:F.shape[0]], full.terminal_values if result.ok else [])
    result.objective = exact_objective(traj, done, network)
    result.trajectory = Trajectory(L, F, result.objective, 0)
    return result


def applied_costs(result: SimResult, prices: PriceSeries, network: ReservoirNetwork) -> np.ndarray:
    """Exact cost of each applied step of a realized trajectory."""
    tr = result.trajectory
    return exact_stage_costs(tr.levels, tr.flows, prices.prices, network)


@dataclass(frozen=True)
class SweepCell:
    T1: int
    T_C: int
    bound_mode: str
    knee: bool  # T1 < T_C
    result: SimResult


def cell_config(base: SimConfig, T1: int, T_C: int, bound_mode: str) -> SimConfig:
    method = base.method
    if T1 == 0 and method == Method.SPLIT_DDP:
        method = Method.PURE_LP
    elif T1 > 0 and method == Method.PURE_LP:
        method = Method.SPLIT_DDP
    return replace(base, T1=T1, T_C=T_C, bound_mode=bound_mode, method=method)


def sweep(base: SimConfig, network: ReservoirNetwork, prices: PriceSeries, T1s: Iterable[int],
          T_Cs: Iterable[int], bound_modes: Iterable[str] = ("static",), mapper=map) -> list[SweepCell]:
    """One simulation per (T1, T_C, bound mode).  ``T1 = 0`` runs the pure
    LP.  ``mapper`` may be a parallel map; cell order is preserved."""
    cfgs = [cell_config(base, a, c, m) for m in bound_modes for c in T_Cs for a in T1s]
    results = list(mapper(_run_cell, [(cfg, network, prices) for cfg in cfgs]))
    return [SweepCell(c.T1, c.T_C, c.bound_mode, c.T1 < c.T_C, r) for c, r in zip(cfgs, results)]


def _run_cell(args):
    cfg, network, prices = args
    return run_simulation(cfg, network, prices)


SUMMARY_COLUMNS = ["method", "T1", "T_C", "bound_mode", "realized_objective", "total_wall_ms",
                   "resolves", "cuts_total"]


def write_summaries(path_or_stream, results: Iterable[SimResult], seed: int, version: str) -> None:
    """CSV with a ``# seed=... version=...`` comment line and a header row."""
    own = isinstance(path_or_stream, (str, bytes)) or hasattr(path_or_stream, "__fspath__")
    f = open(path_or_stream, "w", newline="") if own else path_or_stream
    try:
        f.write(f"# seed={seed} version={version}\n")
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow(r.summary())
    finally:
        if own:
            f.close()
