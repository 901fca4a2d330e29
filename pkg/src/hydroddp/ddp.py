"""Split-horizon dual dynamic programming.

The first ``T1`` steps are solved by grid DP on the exact bilinear model; the
remaining steps by an LP built from McCormick envelopes.  The LP value as a
function of the hand-over state is convex and piecewise linear, so its duals
give affine underestimators (cuts) that feed back into the first stage as a
terminal cost.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .dp import Grid, extract_policy_trajectory, linear_terminal, refinement_epsilon, solve_dp
from .linearize import HorizonLayout, build_horizon_problem, delta_schedule
from .lp import LpProblem, LpSolution, SolverError, Status, solve_lp
from .model import PriceSeries, ReservoirNetwork, Trajectory, exact_objective

log = logging.getLogger(__name__)

DEDUP_TOL = 1e-9


class RecourseError(SolverError):
    """The second stage was infeasible from an in-bounds hand-over state."""


@dataclass(frozen=True)
class Cut:
    a: np.ndarray
    b: float
    origin: int = 0

    def __call__(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.a + self.b


class CutSet:
    """Pointwise maximum of affine cuts; the empty set evaluates to 0."""

    def __init__(self, cuts=()):
        self.cuts: list[Cut] = []
        for c in cuts:
            self.add(c)

    def __len__(self):
        return len(self.cuts)

    def __iter__(self):
        return iter(self.cuts)

    def find(self, cut: Cut) -> int:
        for i, c in enumerate(self.cuts):
            if abs(c.b - cut.b) <= DEDUP_TOL and np.all(np.abs(c.a - cut.a) <= DEDUP_TOL):
                return i
        return -1

    def add(self, cut: Cut) -> bool:
        """Append unless an equal cut (within 1e-9) is present."""
        if not (np.all(np.isfinite(cut.a)) and math.isfinite(cut.b)):
            raise ValueError("cut coefficients must be finite")
        if self.find(cut) >= 0:
            return False
        self.cuts.append(cut)
        return True

    def evaluate(self, x):
        """Max over cuts at one state (returns float) or at rows of a matrix."""
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if not self.cuts:
            out = np.zeros(X.shape[0])
        else:
            A = np.array([c.a for c in self.cuts])
            b = np.array([c.b for c in self.cuts])
            out = (X @ A.T + b).max(axis=1)
        return float(out[0]) if single else out


# -- second stage ------------------------------------------------------------------
@dataclass
class SecondStage:
    """LP template over steps ``T1 .. T`` with the hand-over levels as the
    right-hand side of the coupling rows.

    ``prices`` is indexed from the start of the whole problem, whose state
    ``anchor_levels`` also anchors tightened envelope boxes.
    """

    network: ReservoirNetwork
    prices: PriceSeries
    T1: int
    T: int
    tightened: bool
    lp: LpProblem
    layout: HorizonLayout
    backend: str = "highs"

    @property
    def coupling_rows(self) -> np.ndarray:
        return self.layout.coupling_rows

    def with_state(self, x) -> LpProblem:
        b_eq = self.lp.b_eq.copy()
        b_eq[self.coupling_rows] = x
        return LpProblem(self.lp.c, self.lp.A_eq, b_eq, self.lp.A_in, self.lp.b_in, self.lp.lb,
                         self.lp.ub, self.lp.var_tags, self.lp.row_tags)


def build_second_stage_lp(network: ReservoirNetwork, prices: PriceSeries, T1: int, T: int,
                          tightened: bool = False, anchor_levels=None, prune: bool = False,
                          backend: str = "highs") -> SecondStage:
    """``backend`` is passed to ``lp.solve_lp``.  ``prune`` keeps only the
    envelope rows that can bind (see ``linearize.build_horizon_problem``)."""
    if not 0 <= T1:
        raise ValueError("T1 must be nonnegative")
    if T1 >= T:
        raise ValueError(f"empty second stage: T1={T1} >= T={T}")
    if prices.T < T:
        raise ValueError(f"price series has {prices.T} steps, need {T}")
    window = PriceSeries(prices.prices[T1:T], prices.terminal_values)
    anchor = network.initial_levels if anchor_levels is None else np.asarray(anchor_levels, dtype=float)
    lp, layout = build_horizon_problem(network, window, anchor, tightened=tightened,
                                       anchor_levels=anchor, anchor_offset=T1, prune=prune)
    return SecondStage(network, prices, T1, T, tightened, lp, layout, backend)


@dataclass
class SecondStageSolution:
    objective: float
    coupling_duals: np.ndarray  # lam on the coupling rows
    levels: np.ndarray  # (T-T1+1, N), first row = x_T1
    flows: np.ndarray
    x_T1: np.ndarray
    solution: LpSolution
    problem: LpProblem


def solve_second_stage(stage: SecondStage, x_T1) -> SecondStageSolution:
    x = np.asarray(x_T1, dtype=float)
    net = stage.network
    if np.any(x < net.level_min - 1e-9) or np.any(x > net.level_max + 1e-9):
        raise ValueError(f"hand-over levels {x} outside the level bounds")
    problem = stage.with_state(x)
    sol = solve_lp(problem, stage.backend)
    if sol.status == Status.INFEASIBLE:
        raise RecourseError(f"second stage infeasible from x_T1={x.tolist()}: complete recourse "
                            "is violated, which the construction should rule out")
    if not sol.optimal:
        raise SolverError(f"second stage ended with status {sol.status.value}")
    lay = stage.layout
    return SecondStageSolution(sol.objective, sol.dual_eq[lay.coupling_rows].copy(),
                               sol.x[lay.level_idx], sol.x[lay.flow_idx], x, sol, problem)


def extract_cut(sol: SecondStageSolution, stage: SecondStage, origin: int = 0) -> Cut:
    """Affine underestimator of the second-stage value, tight at ``sol.x_T1``.

    The slope is the stationarity residual of the hand-over columns without
    the coupling rows (objective coefficient plus the other rows' dual
    contributions); the intercept is the dual objective with the coupling
    rows left out.
    """
    s = sol.solution
    if s is None or not s.optimal:
        raise ValueError("cuts need an optimal second-stage solution")
    p = sol.problem
    rows = stage.coupling_rows
    cols = stage.layout.level_idx[0]
    lam = s.dual_eq.copy()
    lam[rows] = 0.0
    a = p.c[cols] + (p.A_eq.T @ lam)[cols] + (p.A_in.T @ s.dual_in)[cols]
    lo_m = np.isfinite(p.lb)
    up_m = np.isfinite(p.ub)
    b = (-p.b_eq @ lam - p.b_in @ s.dual_in
         + p.lb[lo_m] @ s.dual_lb[lo_m] - p.ub[up_m] @ s.dual_ub[up_m])
    return Cut(np.asarray(a, dtype=float), float(b), origin)


# -- Algorithm loop ------------------------------------------------------------------
@dataclass(frozen=True)
class BoundsReport:
    g0_lower: float
    eps_surrogate: float
    sum_delta: float
    interval: tuple
    realized_objective: float
    oracle_value: float | None = None
    oracle_in_interval: bool | None = None
    realized_in_band: bool | None = None

    def as_dict(self) -> dict:
        return {"G0_lower": self.g0_lower, "eps_surrogate": self.eps_surrogate,
                "sum_delta": self.sum_delta, "interval": list(self.interval),
                "realized_objective": self.realized_objective, "oracle_value": self.oracle_value,
                "oracle_in_interval": self.oracle_in_interval, "realized_in_band": self.realized_in_band}


@dataclass(frozen=True)
class DdpResult:
    """Outcome of one split-horizon solve.

    ``ub_history[k]`` is the second-stage LP value at the k-th hand-over
    state and ``lb_history[k]`` the cut model at that state before the cut
    it generates is added (``-inf`` while the cut set is empty).
    ``master_history[k]`` is the first-stage DP value with the cut model as
    terminal cost, a lower estimate of the whole problem.
    """

    trajectory: Trajectory
    converged: bool
    iterations: int
    ub_history: tuple
    lb_history: tuple
    master_history: tuple
    cuts: tuple
    x_T1: np.ndarray
    T1: int
    T: int
    grid: Grid
    tightened: bool
    start_levels: np.ndarray
    log_records: tuple = ()
    wall_s: float = 0.0
    lp_wall_s: float = 0.0
    dp_wall_s: float = 0.0

    @property
    def g0_lower(self) -> float:
        return self.master_history[-1]

    @property
    def gap(self) -> float:
        return self.ub_history[-1] - self.lb_history[-1] if self.ub_history else 0.0

    def summary(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations, "T1": self.T1, "T": self.T,
                "cuts": len(self.cuts), "UB": self.ub_history[-1] if self.ub_history else None,
                "LB": self.lb_history[-1] if self.lb_history else None, "G0_lower": self.g0_lower,
                "objective": self.trajectory.objective, "x_T1": self.x_T1.tolist(),
                "wall_ms": 1000 * self.wall_s}


def convergence_tol(ub: float) -> float:
    return max(1e-6 * (1.0 + abs(ub)), 1e-4)


def run_algorithm1(network: ReservoirNetwork, prices: PriceSeries, T1: int, T: int | None = None,
                   grid: Grid = Grid(), tol: float | None = None, max_iter: int = 25, *,
                   tightened: bool = False, start_levels=None, lp_backend: str = "highs",
                   prune: bool = True, log_stream=None, node_map=None) -> DdpResult:
    """Alternate first-stage DP and second-stage LP until the bounds meet.

    ``prices`` carries the terminal water values.  ``tol`` overrides the
    hybrid relative/absolute gap tolerance.  When ``T1 >= T`` the whole
    horizon is one DP with the terminal credit and no cuts.
    ``log_stream`` receives one JSON object per iteration.
    """
    T = prices.T if T is None else T
    if T1 < 1 and T1 < T:
        raise ValueError("the first stage needs at least one step")
    if prices.T < T:
        raise ValueError(f"price series has {prices.T} steps, need {T}")
    t_begin = time.perf_counter()
    start = network.initial_levels if start_levels is None else np.asarray(start_levels, dtype=float)
    full = PriceSeries(prices.prices[:T], prices.terminal_values)

    if T1 >= T:
        table, value = solve_dp(network, full, 0, T, linear_terminal(full.terminal_values), grid, start,
                                node_map)
        roll = extract_policy_trajectory(table, start, network, full)
        wall = time.perf_counter() - t_begin
        return DdpResult(roll.trajectory, True, 1, (), (), (value,), (), roll.trajectory.levels[-1],
                         T, T, grid, tightened, start, (), wall, 0.0, wall)

    stage = build_second_stage_lp(network, full, T1, T, tightened, start,
                                  prune=prune, backend=lp_backend)
    first = PriceSeries(full.prices[:T1])
    cuts = CutSet()
    ub_h, lb_h, m_h, records = [], [], [], []
    converged = False
    lp_wall = dp_wall = 0.0
    roll = sol = None
    it = 0
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        table, g0 = solve_dp(network, first, 0, T1, cuts.evaluate, grid, start, node_map)
        roll = extract_policy_trajectory(table, start, network, first)
        x = roll.trajectory.levels[-1]
        t1 = time.perf_counter()
        sol = solve_second_stage(stage, x)
        t2 = time.perf_counter()
        dp_wall += t1 - t0
        lp_wall += t2 - t1
        ub = sol.objective
        lb = cuts.evaluate(x) if len(cuts) else -math.inf
        ub_h.append(ub)
        lb_h.append(lb)
        m_h.append(g0)
        converged = ub - lb <= (tol if tol is not None else convergence_tol(ub))
        if not converged:
            cuts.add(extract_cut(sol, stage, it))
        rec = {"iter": it, "x_T1": x.tolist(), "UB": ub, "LB": lb if math.isfinite(lb) else None,
               "cut_count": len(cuts), "wall_ms": round(1000 * (t2 - t0), 3)}
        records.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
        log.debug("iteration %s", rec)
        if converged:
            break

    head = roll.trajectory
    levels = np.vstack([head.levels, sol.levels[1:]])
    flows = np.vstack([head.flows, sol.flows])
    traj = Trajectory(levels, flows, np.nan, T1)
    traj = Trajectory(levels, flows, exact_objective(traj, full, network), T1)
    if not converged:
        log.warning("split-horizon loop stopped after %d iterations, gap %.6g", it, ub_h[-1] - lb_h[-1])
    return DdpResult(traj, converged, it, tuple(ub_h), tuple(lb_h), tuple(m_h), tuple(cuts.cuts), x,
                     T1, T, grid, tightened, start, tuple(records), time.perf_counter() - t_begin,
                     lp_wall, dp_wall)


def bounds_report(result: DdpResult, network: ReservoirNetwork, prices: PriceSeries,
                  oracle_value: float | None = None) -> BoundsReport:
    """Suboptimality interval ``[G0_lower, G0_lower + eps + sum(delta)]``.

    ``eps`` is a surrogate: the change of the first-stage DP value under one
    grid refinement with the final cut model as terminal.  It is an
    estimate, not a certified solve tolerance.
    """
    T1, T = result.T1, result.T
    full = PriceSeries(prices.prices[:T], prices.terminal_values)
    if T1 >= T:
        terminal = linear_terminal(full.terminal_values)
        eps, _, _ = refinement_epsilon(network, full, 0, T, terminal, result.grid, result.start_levels)
        sum_delta = 0.0
    else:
        cuts = CutSet(result.cuts)
        eps, _, _ = refinement_epsilon(network, PriceSeries(full.prices[:T1]), 0, T1, cuts.evaluate,
                                       result.grid, result.start_levels)
        sum_delta = float(delta_schedule(network, full, T1, T, result.tightened,
                                         result.start_levels).sum())
    g0 = result.g0_lower
    hi = g0 + eps + sum_delta
    realized = result.trajectory.objective
    inside = band = None
    if oracle_value is not None:
        inside = bool(g0 <= oracle_value <= hi)
        band = bool(oracle_value <= realized <= oracle_value + eps + sum_delta)
    return BoundsReport(g0, eps, sum_delta, (g0, hi), realized, oracle_value, inside, band)
