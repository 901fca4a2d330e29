"""Linear programming kernel with dual extraction, plus a small branch-and-bound.

Sign convention (used everywhere a dual is consumed):

    L(x, lam, nu, r_lo, r_up) = c.x + lam.(A_eq x - b_eq) + nu.(A_in x - b_in)
                                + r_lo.(lb - x) + r_up.(x - ub)

with ``nu, r_lo, r_up >= 0``.  Hence ``lam = -d obj / d b_eq`` and strong
duality reads ``c.x = -b_eq.lam - b_in.nu + lb.r_lo - ub.r_up`` (infinite
bounds carry zero multipliers).
"""
from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, milp, Bounds, LinearConstraint

FEAS_TOL = 1e-9
OPT_TOL = 1e-9


class SolverError(RuntimeError):
    """The LP/MILP solver stalled or produced an unusable answer."""


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    TIME_LIMIT = "time_limit"
    NO_SOLUTION = "no_solution"


def _as_matrix(A, n):
    if A is None:
        return np.zeros((0, n))
    if sp.issparse(A):
        return A.tocsr()
    return np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, n)


@dataclass
class LpProblem:
    """min c.x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub.

    Matrices may be dense arrays or scipy sparse matrices.  ``var_tags`` and
    ``row_tags`` map names to index arrays (rows indexed separately within the
    equality and inequality blocks, tag keys prefixed ``eq:`` / ``in:``).
    """

    c: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_in: object = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    var_tags: dict = field(default_factory=dict)
    row_tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_eq = _as_matrix(self.A_eq, n)
        self.A_in = _as_matrix(self.A_in, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).ravel()
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).ravel().copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel().copy()
        if self.A_eq.shape != (self.b_eq.size, n) or self.A_in.shape != (self.b_in.size, n):
            raise ValueError("constraint block dimensions do not match")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound vectors must match the number of variables")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub for some variable")

    @property
    def n(self) -> int:
        return self.c.size

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        Ae = self.A_eq.toarray() if sp.issparse(self.A_eq) else self.A_eq
        Ai = self.A_in.toarray() if sp.issparse(self.A_in) else self.A_in
        return Ae, Ai

    def with_bounds(self, lb, ub) -> "LpProblem":
        return LpProblem(self.c, self.A_eq, self.b_eq, self.A_in, self.b_in, lb, ub,
                         self.var_tags, self.row_tags)


@dataclass
class LpSolution:
    status: Status
    x: np.ndarray | None = None
    objective: float = math.nan
    dual_eq: np.ndarray | None = None  # lam, free
    dual_in: np.ndarray | None = None  # nu >= 0
    dual_lb: np.ndarray | None = None  # r_lo >= 0
    dual_ub: np.ndarray | None = None  # r_up >= 0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL

    def dual_objective(self, p: LpProblem) -> float:
        return float(-p.b_eq @ self.dual_eq - p.b_in @ self.dual_in
                     + _finite_dot(p.lb, self.dual_lb) - _finite_dot(p.ub, self.dual_ub))


def _finite_dot(bound, mult):
    mask = np.isfinite(bound)
    return float(bound[mask] @ mult[mask])


def kkt_residuals(p: LpProblem, s: LpSolution) -> dict:
    """Primal/dual feasibility, stationarity, complementarity and duality gap."""
    x = s.x
    r_eq = p.A_eq @ x - p.b_eq
    r_in = p.A_in @ x - p.b_in
    stat = (p.c + p.A_eq.T @ s.dual_eq + p.A_in.T @ s.dual_in - s.dual_lb + s.dual_ub)
    comp_in = s.dual_in * r_in
    lo_gap = np.where(np.isfinite(p.lb), x - p.lb, 0.0)
    up_gap = np.where(np.isfinite(p.ub), p.ub - x, 0.0)
    comp_b = np.concatenate([s.dual_lb * lo_gap, s.dual_ub * up_gap])
    return {
        "primal_eq": float(np.max(np.abs(r_eq), initial=0.0)),
        "primal_in": float(np.max(r_in, initial=0.0)),
        "bounds": float(max(np.max(p.lb - x, initial=0.0), np.max(x - p.ub, initial=0.0))),
        "dual_sign": float(-min(np.min(s.dual_in, initial=0.0), np.min(s.dual_lb, initial=0.0),
                                np.min(s.dual_ub, initial=0.0))),
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "complementarity": float(np.max(np.abs(np.concatenate([comp_in, comp_b])), initial=0.0)),
        "gap": abs(float(p.c @ x) - s.dual_objective(p)),
    }


# -- dense bounded-variable revised simplex ------------------------------------
_AT_LB, _AT_UB, _FREE, _BASIC = 0, 1, 2, 3


class _Simplex:
    """Two-phase primal simplex on ``A z = b, lo <= z <= hi`` (dense).

    Dantzig pricing; switches permanently to Bland's rule after
    ``5 * (rows + cols)`` consecutive degenerate pivots.
    """

    def __init__(self, A, b, cost, lo, hi, max_iter=None):
        self.A = A
        self.b = b
        self.cost = cost
        self.lo = lo
        self.hi = hi
        self.m, self.n = A.shape
        self.max_iter = max_iter or 50 * (self.m + self.n) + 1000
        self.iterations = 0
        self.bland = False
        self.degenerate_run = 0

    def _nonbasic_value(self, j):
        if self.state[j] == _AT_LB:
            return self.lo[j]
        if self.state[j] == _AT_UB:
            return self.hi[j]
        return 0.0

    def _refactor(self):
        self.Binv = np.linalg.inv(self.A[:, self.basis])
        self.since_refactor = 0

    def _compute_xB(self):
        xN = self.z.copy()
        xN[self.basis] = 0.0
        self.z[self.basis] = self.Binv @ (self.b - self.A @ xN)

    def run(self, cost):
        """Optimize ``cost`` from the current basis. Returns 'optimal' or 'unbounded'."""
        A, lo, hi = self.A, self.lo, self.hi
        degen_limit = 5 * (self.m + self.n)
        while True:
            if self.iterations >= self.max_iter:
                raise SolverError(f"simplex iteration limit {self.max_iter} reached")
            if self.since_refactor >= 50:
                self._refactor()
                self._compute_xB()
            y = cost[self.basis] @ self.Binv
            d = cost - y @ A
            d[self.basis] = 0.0
            st = self.state
            cand = ((st == _AT_LB) & (d < -OPT_TOL)) | ((st == _AT_UB) & (d > OPT_TOL)) \
                | ((st == _FREE) & (np.abs(d) > OPT_TOL))
            cand &= hi > lo
            idx = np.flatnonzero(cand)
            if idx.size == 0:
                self.y, self.d = y, d
                return "optimal"
            j = int(idx[0]) if self.bland else int(idx[np.argmax(np.abs(d[idx]))])
            sigma = -1.0 if d[j] > 0 else 1.0
            w = self.Binv @ A[:, j]
            delta = -sigma * w
            zb = self.z[self.basis]
            lb_b, ub_b = lo[self.basis], hi[self.basis]
            theta = np.full(self.m, np.inf)
            dec = delta < -1e-11
            inc = delta > 1e-11
            theta[dec] = (zb[dec] - lb_b[dec]) / -delta[dec]
            theta[inc] = (ub_b[inc] - zb[inc]) / delta[inc]
            theta = np.maximum(theta, 0.0)
            flip = hi[j] - lo[j]
            tmin = theta.min() if self.m else np.inf
            if not np.isfinite(tmin) and not np.isfinite(flip):
                self.y, self.d = y, d
                self.unbounded_dir = (j, sigma)
                return "unbounded"
            self.iterations += 1
            if flip <= tmin:
                self.z[self.basis] += flip * delta
                self.state[j] = _AT_UB if st[j] == _AT_LB else _AT_LB
                self.z[j] = self._nonbasic_value(j)
                step = flip
            else:
                ties = np.flatnonzero(theta <= tmin + 1e-12)
                if self.bland:
                    r = int(ties[np.argmin(np.asarray(self.basis)[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(delta[ties]))])
                step = theta[r]
                leaving = self.basis[r]
                self.z[self.basis] += step * delta
                self.z[j] += sigma * step
                self.state[leaving] = _AT_LB if delta[r] < 0 else _AT_UB
                if not np.isfinite(lo[leaving]) and not np.isfinite(hi[leaving]):
                    self.state[leaving] = _FREE
                self.z[leaving] = self._nonbasic_value(leaving)
                self.basis[r] = j
                self.state[j] = _BASIC
                # eta update of the basis inverse
                piv = w[r]
                if abs(piv) < 1e-12:
                    self._refactor()
                else:
                    row = self.Binv[r] / piv
                    self.Binv -= np.outer(w, row)
                    self.Binv[r] = row
                    self.since_refactor += 1
            if step <= 1e-12:
                self.degenerate_run += 1
                if self.degenerate_run > degen_limit:
                    self.bland = True
            else:
                self.degenerate_run = 0


def _simplex_solve(p: LpProblem, max_iter=None) -> LpSolution:
    Ae, Ai = p.dense()
    n, me, mi = p.n, Ae.shape[0], Ai.shape[0]
    m = me + mi
    # columns: x (n), slacks (mi), artificials (m)
    A = np.zeros((m, n + mi + m))
    A[:me, :n] = Ae
    A[me:, :n] = Ai
    A[me:, n:n + mi] = np.eye(mi)
    b = np.concatenate([p.b_eq, p.b_in])
    lo = np.concatenate([p.lb, np.zeros(mi), np.zeros(m)])
    hi = np.concatenate([p.ub, np.full(mi, np.inf), np.full(m, np.inf)])

    state = np.empty(n + mi + m, dtype=int)
    z = np.zeros(n + mi + m)
    for j in range(n + mi):
        if np.isfinite(lo[j]):
            state[j], z[j] = _AT_LB, lo[j]
        elif np.isfinite(hi[j]):
            state[j], z[j] = _AT_UB, hi[j]
        else:
            state[j], z[j] = _FREE, 0.0
    resid = b - A[:, :n + mi] @ z[:n + mi]
    sign = np.where(resid >= 0, 1.0, -1.0)
    A[np.arange(m), n + mi + np.arange(m)] = sign
    art = n + mi + np.arange(m)
    z[art] = np.abs(resid)
    state[art] = _BASIC

    s = _Simplex(A, b, None, lo, hi, max_iter)
    s.z, s.state, s.basis = z, state, list(art)
    s._refactor()

    c1 = np.zeros(n + mi + m)
    c1[art] = 1.0
    s.run(c1)
    infeas = float(s.z[art].sum())
    scale = 1.0 + float(np.abs(b).max(initial=0.0))
    if infeas > FEAS_TOL * scale * max(m, 1):
        return LpSolution(Status.INFEASIBLE, iterations=s.iterations, info={"phase1": infeas})
    # pin artificials at zero for phase 2
    hi[art] = 0.0
    for j in art:
        if state[j] != _BASIC:
            state[j] = _AT_LB
            z[j] = 0.0
    c2 = np.concatenate([p.c, np.zeros(mi + m)])
    s._refactor()
    s._compute_xB()
    outcome = s.run(c2)
    if outcome == "unbounded":
        return LpSolution(Status.UNBOUNDED, iterations=s.iterations)
    # final clean-up: recompute basic values from a fresh factorization
    s._refactor()
    s._compute_xB()
    y = c2[s.basis] @ s.Binv
    d = c2 - y @ A
    x = z[:n].copy()
    lam = -y[:me]
    nu = np.maximum(-y[me:], 0.0)
    dx = d[:n]
    st = state[:n]
    r_lo = np.where((st == _AT_LB) & (dx > 0), dx, 0.0)
    r_up = np.where((st == _AT_UB) & (dx < 0), -dx, 0.0)
    # fixed variables (lo == hi) may sit at either bound with any-sign reduced cost
    fixed = (st != _BASIC) & (p.lb == p.ub)
    r_lo = np.where(fixed, np.maximum(dx, 0.0), r_lo)
    r_up = np.where(fixed, np.maximum(-dx, 0.0), r_up)
    return LpSolution(Status.OPTIMAL, x, float(p.c @ x), lam, nu, r_lo, r_up, s.iterations)


# -- HiGHS backend ------------------------------------------------------------------
_HIGHS_ATTEMPTS = (
    ("highs-ds", {"primal_feasibility_tolerance": FEAS_TOL, "dual_feasibility_tolerance": OPT_TOL}),
    ("highs-ds", {}),
    ("highs-ipm", {}),
)


def _highs_solve(p: LpProblem) -> LpSolution:
    """HiGHS through scipy.  Strict tolerances first; on an unrecognised
    status (HiGHS gives up on badly scaled instances at 1e-9) retry with its
    default tolerances, then with interior point plus crossover."""
    kw = {}
    if p.A_eq.shape[0]:
        kw.update(A_eq=p.A_eq, b_eq=p.b_eq)
    if p.A_in.shape[0]:
        kw.update(A_ub=p.A_in, b_ub=p.b_in)
    bounds = np.column_stack([p.lb, p.ub])
    messages = []
    for attempt, (method, opts) in enumerate(_HIGHS_ATTEMPTS):
        res = linprog(p.c, bounds=bounds, method=method, options=opts, **kw)
        if res.status in (0, 2, 3):
            break
        messages.append(res.message)
    else:
        raise SolverError(f"HiGHS failed: {'; '.join(messages)}")
    info = {"message": res.message, "attempt": attempt}
    if res.status == 2:
        return LpSolution(Status.INFEASIBLE, info=info)
    if res.status == 3:
        return LpSolution(Status.UNBOUNDED, info=info)
    lam = -res.eqlin.marginals if p.A_eq.shape[0] else np.zeros(0)
    nu = -res.ineqlin.marginals if p.A_in.shape[0] else np.zeros(0)
    r_lo = np.asarray(res.lower.marginals, dtype=float)
    r_up = -np.asarray(res.upper.marginals, dtype=float)
    return LpSolution(Status.OPTIMAL, np.asarray(res.x), float(res.fun), lam, nu, r_lo, r_up,
                      int(getattr(res, "nit", 0)), info)


def solve_lp(p: LpProblem, backend: str = "auto", max_iter: int | None = None) -> LpSolution:
    """Solve ``p`` to a vertex optimum with duals.

    ``backend``: ``"simplex"`` (dense revised simplex in this module),
    ``"highs"`` (HiGHS dual simplex through scipy), or ``"auto"`` which uses
    the dense simplex for problems with at most 200 rows + columns.
    """
    if backend == "auto":
        size = p.n + p.A_eq.shape[0] + p.A_in.shape[0]
        backend = "simplex" if size <= 200 and not sp.issparse(p.A_eq) and not sp.issparse(p.A_in) else "highs"
    if backend == "simplex":
        return _simplex_solve(p, max_iter)
    if backend == "highs":
        return _highs_solve(p)
    raise ValueError(f"unknown backend {backend!r}")


# -- mixed-integer layer -------------------------------------------------------------
@dataclass
class MilpProblem:
    lp: LpProblem
    binaries: np.ndarray

    def __post_init__(self):
        self.binaries = np.asarray(self.binaries, dtype=int)
        if self.binaries.size and (self.binaries.min() < 0 or self.binaries.max() >= self.lp.n):
            raise ValueError("binary index out of range")
        if np.any(self.lp.lb[self.binaries] < 0) or np.any(self.lp.ub[self.binaries] > 1):
            raise ValueError("binary variables must be boxed in [0, 1]")


@dataclass
class MilpResult:
    solution: LpSolution
    best_bound: float
    gap: float
    nodes: int
    wall_s: float

    @property
    def status(self) -> Status:
        return self.solution.status


def _rel_gap(inc, bound):
    if not np.isfinite(inc):
        return math.inf
    return abs(inc - bound) / max(1.0, abs(inc))


def solve_milp(p: MilpProblem, gap_tol: float = 1e-6, time_limit: float = 60.0,
               backend: str = "bnb", lp_backend: str = "auto",
               heuristic: Callable[[np.ndarray], np.ndarray | None] | None = None,
               int_tol: float = 1e-6, node_limit: int | None = None) -> MilpResult:
    """Best-first branch-and-bound over binary variables.

    ``heuristic`` maps a relaxation solution to a candidate binary assignment
    (or None); candidates are completed by an LP with binaries fixed.  The
    search is single-threaded, so the incumbent is deterministic given the
    node and time limits.  ``backend="highs"`` delegates to HiGHS' MILP solver.
    """
    if backend == "highs":
        return _highs_milp(p, gap_tol, time_limit)
    t0 = time.perf_counter()
    lp = p.lp
    bins = p.binaries
    incumbent: LpSolution | None = None
    inc_obj = math.inf
    counter = itertools.count()
    nodes = 0

    def try_assignment(assign, lb, ub):
        nonlocal incumbent, inc_obj
        lb2, ub2 = lb.copy(), ub.copy()
        lb2[bins] = assign
        ub2[bins] = assign
        sol = solve_lp(lp.with_bounds(lb2, ub2), lp_backend)
        if sol.optimal and sol.objective < inc_obj - 1e-12:
            incumbent, inc_obj = sol, sol.objective

    root = solve_lp(lp, lp_backend)
    nodes = 1
    if root.status == Status.INFEASIBLE:
        return MilpResult(root, math.inf, math.inf, nodes, time.perf_counter() - t0)
    if root.status == Status.UNBOUNDED:
        return MilpResult(root, -math.inf, math.inf, nodes, time.perf_counter() - t0)
    heap = [(root.objective, next(counter), lp.lb.copy(), lp.ub.copy(), root)]
    best_bound = root.objective
    timed_out = False
    while heap:
        bound, _, lb, ub, sol = heapq.heappop(heap)
        best_bound = bound
        if bound >= inc_obj - gap_tol * max(1.0, abs(inc_obj)):
            best_bound = min(bound, inc_obj)
            heap.clear()
            break
        if time.perf_counter() - t0 > time_limit or (node_limit and nodes >= node_limit):
            heapq.heappush(heap, (bound, next(counter), lb, ub, sol))
            timed_out = True
            break
        xb = sol.x[bins]
        frac = np.abs(xb - np.round(xb))
        if frac.max(initial=0.0) <= int_tol:
            if sol.objective < inc_obj:
                incumbent, inc_obj = sol, sol.objective
            continue
        if heuristic is not None:
            cand = heuristic(sol.x)
            if cand is not None:
                try_assignment(np.asarray(cand, dtype=float), lb, ub)
                nodes += 1
        k = bins[int(np.argmax(frac))]
        for val in (math.floor(sol.x[k]), math.ceil(sol.x[k])):
            lb2, ub2 = lb.copy(), ub.copy()
            lb2[k] = ub2[k] = val
            child = solve_lp(lp.with_bounds(lb2, ub2), lp_backend)
            nodes += 1
            if child.optimal and child.objective < inc_obj:
                heapq.heappush(heap, (child.objective, next(counter), lb2, ub2, child))
    if heap:
        best_bound = min(best_bound, heap[0][0])
    elif not timed_out:
        best_bound = inc_obj if incumbent is not None else math.inf
    wall = time.perf_counter() - t0
    if incumbent is None:
        status = Status.NO_SOLUTION if timed_out else Status.INFEASIBLE
        return MilpResult(LpSolution(status), best_bound, math.inf, nodes, wall)
    gap = _rel_gap(inc_obj, best_bound)
    incumbent.status = Status.OPTIMAL if gap <= gap_tol or not timed_out else Status.TIME_LIMIT
    return MilpResult(incumbent, best_bound, gap, nodes, wall)


def _highs_milp(p: MilpProblem, gap_tol, time_limit) -> MilpResult:
    t0 = time.perf_counter()
    lp = p.lp
    integrality = np.zeros(lp.n)
    integrality[p.binaries] = 1
    cons = []
    if lp.A_eq.shape[0]:
        cons.append(LinearConstraint(lp.A_eq, lp.b_eq, lp.b_eq))
    if lp.A_in.shape[0]:
        cons.append(LinearConstraint(lp.A_in, -np.inf, lp.b_in))
    res = milp(lp.c, constraints=cons, integrality=integrality, bounds=Bounds(lp.lb, lp.ub),
               options={"time_limit": max(time_limit, 1e-3), "mip_rel_gap": gap_tol, "disp": False})
    wall = time.perf_counter() - t0
    bound = float(getattr(res, "mip_dual_bound", math.nan) or math.nan)
    if res.x is None:
        status = Status.INFEASIBLE if res.status == 2 else Status.NO_SOLUTION
        return MilpResult(LpSolution(status, info={"message": res.message}), bound, math.inf,
                          int(getattr(res, "mip_node_count", 0) or 0), wall)
    status = Status.OPTIMAL if res.status == 0 else Status.TIME_LIMIT
    sol = LpSolution(status, np.asarray(res.x), float(res.fun), info={"message": res.message})
    return MilpResult(sol, bound, float(getattr(res, "mip_gap", 0.0) or 0.0),
                      int(getattr(res, "mip_node_count", 0) or 0), wall)


# -- plain-text dump ------------------------------------------------------------------
def dump_lp(p: LpProblem, path) -> None:
    """Write ``p`` as text: header ``LP n m_eq m_in``, then lines ``c``, ``lb``,
    ``ub`` and one line per equality row (coefficients then rhs) followed by
    one line per inequality row, all row-major and whitespace separated."""
    Ae, Ai = p.dense()
    with open(path, "w") as fh:
        fh.write(f"LP {p.n} {Ae.shape[0]} {Ai.shape[0]}\n")
        for vec in (p.c, p.lb, p.ub):
            fh.write(" ".join(repr(float(v)) for v in vec) + "\n")
        for A, b in ((Ae, p.b_eq), (Ai, p.b_in)):
            for row, rhs in zip(A, b):
                fh.write(" ".join(repr(float(v)) for v in row) + " " + repr(float(rhs)) + "\n")


def load_lp(path) -> LpProblem:
    with open(path) as fh:
        head = fh.readline().split()
        if head[0] != "LP":
            raise ValueError("not an LP dump")
        n, me, mi = map(int, head[1:])
        vecs = [np.array(fh.readline().split(), dtype=float) for _ in range(3)]
        rows = [np.array(fh.readline().split(), dtype=float) for _ in range(me + mi)]
    eq = np.array(rows[:me]).reshape(me, n + 1)
    iq = np.array(rows[me:]).reshape(mi, n + 1)
    return LpProblem(vecs[0], eq[:, :n], eq[:, n], iq[:, :n], iq[:, n], vecs[1], vecs[2])
