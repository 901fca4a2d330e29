"""McCormick relaxation of the head-dependent power terms and its error bounds.

Every bilinear product ``V * l`` (a flow times the level at one end of its
arc) is replaced by an auxiliary variable ``chi`` constrained by the four
McCormick inequalities over a box of flow and level bounds.  The worst-case
gap of one envelope is ``(V_hi - V_lo) * (l_hi - l_lo) / 4``, attained at the
box midpoint; summing it over terms gives a per-step objective error bound.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lp import LpProblem, MilpProblem
from .model import PriceSeries, ReservoirNetwork


@dataclass(frozen=True)
class Box:
    v_lo: float
    v_hi: float
    l_lo: float
    l_hi: float

    def __post_init__(self):
        if self.v_lo > self.v_hi or self.l_lo > self.l_hi:
            raise ValueError(f"empty box {self}")

    @property
    def chi_range(self) -> tuple[float, float]:
        corners = [self.v_lo * self.l_lo, self.v_lo * self.l_hi, self.v_hi * self.l_lo, self.v_hi * self.l_hi]
        return min(corners), max(corners)


@dataclass(frozen=True)
class EnvelopeRows:
    """Rows ``coef @ (V, l, chi) <= rhs``; rows 0-1 bound chi from below,
    rows 2-3 from above."""

    coef: np.ndarray  # (4, 3)
    rhs: np.ndarray  # (4,)

    def lower(self, v, l):
        v, l = np.asarray(v, dtype=float), np.asarray(l, dtype=float)
        # rows 0,1: a_v V + a_l l - chi <= rhs  ->  chi >= a_v V + a_l l - rhs
        r = [self.coef[k, 0] * v + self.coef[k, 1] * l - self.rhs[k] for k in (0, 1)]
        return np.maximum(r[0], r[1])

    def upper(self, v, l):
        v, l = np.asarray(v, dtype=float), np.asarray(l, dtype=float)
        # rows 2,3: a_v V + a_l l + chi <= rhs  ->  chi <= rhs - a_v V - a_l l
        r = [self.rhs[k] - self.coef[k, 0] * v - self.coef[k, 1] * l for k in (2, 3)]
        return np.minimum(r[0], r[1])


@dataclass(frozen=True)
class BilinearTermRef:
    """One product ``V[arc] * l[reservoir]`` in the objective of step ``t``.

    ``sign`` is +1 for the source side and -1 for the destination side, so
    the objective carries ``coefficient * chi`` with ``coefficient = sign * p_t * beta``.
    """

    arc: int
    reservoir: int
    t: int
    sign: int
    coefficient: float


def mccormick_envelope(box: Box) -> EnvelopeRows:
    vl, vh, ll, lh = box.v_lo, box.v_hi, box.l_lo, box.l_hi
    coef = np.array([
        [lh, vh, -1.0],   # chi >= V lh + vh l - vh lh
        [ll, vl, -1.0],   # chi >= V ll + vl l - vl ll
        [-lh, -vl, 1.0],  # chi <= V lh + vl l - vl lh
        [-ll, -vh, 1.0],  # chi <= V ll + vh l - vh ll
    ])
    rhs = np.array([vh * lh, vl * ll, -vl * lh, -vh * ll])
    return EnvelopeRows(coef, rhs)


def max_envelope_error(box: Box) -> tuple[float, float, float]:
    """Largest gap between the envelope and ``V * l``, and where it occurs."""
    err = (box.v_hi - box.v_lo) * (box.l_hi - box.l_lo) / 4.0
    return err, 0.5 * (box.v_lo + box.v_hi), 0.5 * (box.l_lo + box.l_hi)


# -- bounds --------------------------------------------------------------------------
def tightened_level_bounds(network: ReservoirNetwork, t_abs: int, reference_levels=None):
    """Per-reservoir (lo, hi) reachable after ``t_abs`` steps at full inflow /
    outflow from ``reference_levels`` (default: the network's initial levels)."""
    if t_abs < 0:
        raise ValueError("t_abs must be nonnegative")
    ref = network.initial_levels if reference_levels is None else np.asarray(reference_levels, dtype=float)
    src, dst = network.endpoints()
    vmax = network.flow_max
    inflow = np.zeros(network.n_res)
    outflow = np.zeros(network.n_res)
    for k in range(network.n_arcs):
        if dst[k] >= 0:
            inflow[dst[k]] += vmax[k]
        if src[k] >= 0:
            outflow[src[k]] += vmax[k]
    g = network.gammas
    hi = np.minimum(ref + t_abs * inflow / g, network.level_max)
    lo = np.maximum(ref - t_abs * outflow / g, network.level_min)
    return np.minimum(lo, hi), np.maximum(lo, hi)


def level_bounds(network: ReservoirNetwork, t_abs: int, reference_levels=None, tightened: bool = False):
    if tightened:
        return tightened_level_bounds(network, t_abs, reference_levels)
    return network.level_min, network.level_max


def bilinear_terms(network: ReservoirNetwork, prices, t0: int = 0, t1: int | None = None):
    """All (arc, side) product terms for steps ``t0 .. t1-1`` (basin sides skipped)."""
    p = np.asarray(prices.prices if isinstance(prices, PriceSeries) else prices, dtype=float)
    t1 = len(p) if t1 is None else t1
    src, dst = network.endpoints()
    beta = network.betas
    out = []
    for t in range(t0, t1):
        for k in range(network.n_arcs):
            for res, sign in ((src[k], 1), (dst[k], -1)):
                if res >= 0:
                    out.append(BilinearTermRef(k, int(res), t, sign, sign * p[t] * beta[k]))
    return out


def delta_t(network: ReservoirNetwork, price_t: float, level_lo, level_hi, flow_lo=None, flow_hi=None) -> float:
    """Worst-case objective gap of one relaxed step given its bound boxes."""
    src, dst = network.endpoints()
    flo = network.flow_min if flow_lo is None else np.asarray(flow_lo)
    fhi = network.flow_max if flow_hi is None else np.asarray(flow_hi)
    width = np.asarray(level_hi, dtype=float) - np.asarray(level_lo, dtype=float)
    total = 0.0
    for k, arc in enumerate(network.arcs):
        w = (width[src[k]] if src[k] >= 0 else 0.0) + (width[dst[k]] if dst[k] >= 0 else 0.0)
        total += abs(price_t * arc.beta) / 4.0 * (fhi[k] - flo[k]) * w
    return float(total)


def delta_schedule(network: ReservoirNetwork, prices, T1: int, T: int, tightened: bool = False,
                   reference_levels=None, t_offset: int = 0) -> np.ndarray:
    """delta_t for t = T1..T-1 (indices into ``prices``).

    ``t_offset`` shifts the bound anchor: level bounds at price index t are
    taken ``t_offset + t`` steps after ``reference_levels``.
    """
    p = np.asarray(prices.prices if isinstance(prices, PriceSeries) else prices, dtype=float)
    out = np.zeros(max(T - T1, 0))
    for k, t in enumerate(range(T1, T)):
        lo, hi = level_bounds(network, t_offset + t, reference_levels, tightened)
        out[k] = delta_t(network, p[t], lo, hi)
    return out


def horizon_error_bound(network: ReservoirNetwork, prices, T1: int, T: int, tightened: bool = False,
                        reference_levels=None) -> float:
    return float(delta_schedule(network, prices, T1, T, tightened, reference_levels).sum())


def delta_bounds(network: ReservoirNetwork, prices, T1: int, T: int, tightened: bool = False,
                 reference_levels=None) -> tuple[np.ndarray, float]:
    """Per-step linearization error bounds over the second stage and their sum."""
    d = delta_schedule(network, prices, T1, T, tightened, reference_levels)
    return d, float(d.sum())


# -- multi-cell partition ----------------------------------------------------------------
@dataclass(frozen=True)
class Cell:
    box: Box
    rows: EnvelopeRows
    v_index: int
    l_index: int


@dataclass(frozen=True)
class MulticellPartition:
    """Equal-width ``n_v x n_l`` split of a box.

    Selection: each flow variable picks one of ``n_v`` intervals and each
    level variable one of ``n_l`` intervals (see ``selector_count``); the
    envelope of cell (i, j) is enforced only when both selections agree and
    is relaxed by ``big_m`` otherwise.
    """

    box: Box
    n_v: int
    n_l: int
    cells: tuple[Cell, ...]
    big_m: np.ndarray  # (n_v * n_l, 4)

    def cell(self, i: int, j: int) -> Cell:
        return self.cells[i * self.n_l + j]

    def max_error(self) -> float:
        return max(max_envelope_error(c.box)[0] for c in self.cells)


def selector_count(n: int) -> int:
    """Binaries needed to pick one of ``n`` intervals (1 for a split in two,
    one-hot otherwise)."""
    if n < 1:
        raise ValueError("need at least one interval")
    return 0 if n == 1 else 1 if n == 2 else n


def _row_big_m(rows: EnvelopeRows, box: Box) -> np.ndarray:
    lo = np.array([box.v_lo, box.l_lo, box.chi_range[0]])
    hi = np.array([box.v_hi, box.l_hi, box.chi_range[1]])
    worst = np.where(rows.coef > 0, rows.coef * hi, rows.coef * lo).sum(axis=1) - rows.rhs
    return np.maximum(worst, 0.0)


def multicell_partition(box: Box, n_v: int, n_l: int) -> MulticellPartition:
    if n_v < 1 or n_l < 1:
        raise ValueError("need at least one cell per dimension")
    ve = np.linspace(box.v_lo, box.v_hi, n_v + 1)
    le = np.linspace(box.l_lo, box.l_hi, n_l + 1)
    cells, ms = [], []
    for i in range(n_v):
        for j in range(n_l):
            b = Box(ve[i], ve[i + 1], le[j], le[j + 1])
            rows = mccormick_envelope(b)
            cells.append(Cell(b, rows, i, j))
            ms.append(_row_big_m(rows, box))
    return MulticellPartition(box, n_v, n_l, tuple(cells), np.array(ms))


def multicell_binary_count(n_arcs: int, n_reservoirs: int, T: int, n_v: int = 2, n_l: int = 2) -> int:
    """Binary variables of the multi-cell MILP over ``T`` steps."""
    return T * (n_arcs * selector_count(n_v) + n_reservoirs * selector_count(n_l))


# -- horizon problem builder -----------------------------------------------------------------
@dataclass
class HorizonLayout:
    """Variable/row index maps of a relaxed horizon problem of H steps."""

    H: int
    n_res: int
    n_arcs: int
    level_idx: np.ndarray  # (H+1, N)
    flow_idx: np.ndarray  # (H, A)
    chi_idx: np.ndarray  # (H, n_terms_per_step)
    term_arc: np.ndarray
    term_res: np.ndarray
    term_sign: np.ndarray
    coupling_rows: np.ndarray  # equality row indices fixing levels[0]
    first_step_eq_rows: np.ndarray
    first_step_in_rows: np.ndarray
    binary_idx: np.ndarray = None

    def levels(self, x) -> np.ndarray:
        return x[self.level_idx]

    def flows(self, x) -> np.ndarray:
        return x[self.flow_idx]


class _Rows:
    """Accumulates sparse rows as COO triplets."""

    def __init__(self):
        self.r, self.c, self.v, self.rhs = [], [], [], []
        self.count = 0

    def add_block(self, cols: np.ndarray, vals: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Add ``len(rhs)`` rows; ``cols``/``vals`` are (rows, k) arrays."""
        cols = np.atleast_2d(cols)
        vals = np.broadcast_to(vals, cols.shape)
        m = cols.shape[0]
        rows = self.count + np.arange(m)
        keep = vals != 0
        self.r.append(np.broadcast_to(rows[:, None], cols.shape)[keep])
        self.c.append(cols[keep])
        self.v.append(vals[keep])
        self.rhs.append(np.asarray(rhs, dtype=float).ravel())
        self.count += m
        return rows

    def matrix(self, n):
        if not self.count:
            return sp.csr_matrix((0, n)), np.zeros(0)
        r = np.concatenate(self.r)
        c = np.concatenate(self.c)
        v = np.concatenate(self.v)
        return sp.csr_matrix((v, (r, c)), shape=(self.count, n)), np.concatenate(self.rhs)


def build_horizon_problem(network: ReservoirNetwork, prices, start_levels, *, terminal_values=None,
                          tightened: bool = False, anchor_levels=None, anchor_offset: int = 0,
                          cells: tuple[int, int] = (1, 1), prune: bool = False):
    """Relaxed (LP, or MILP when ``cells != (1, 1)``) problem over ``len(prices)`` steps.

    Step ``t`` of the window uses McCormick boxes built from level bounds
    ``anchor_offset + t`` steps after ``anchor_levels``.  ``levels[0]`` is a
    free variable pinned by coupling equality rows whose right-hand side is
    ``start_levels``.  Dynamics rows read ``l_t + D V_t - l_{t+1} = 0``.

    With ``prune`` (single-cell only) each term keeps just the two envelope
    rows that can bind given the sign of its objective coefficient, or none
    when that coefficient is zero.  Wherever the full problem is feasible
    both have the same optimal value.

    Returns ``(LpProblem or MilpProblem, HorizonLayout)``.
    """
    p = np.asarray(prices.prices if isinstance(prices, PriceSeries) else prices, dtype=float)
    if terminal_values is None:
        terminal_values = prices.terminal_values if isinstance(prices, PriceSeries) else np.zeros(0)
    tv = np.asarray(terminal_values, dtype=float)
    H = len(p)
    N, A = network.n_res, network.n_arcs
    anchor = network.initial_levels if anchor_levels is None else np.asarray(anchor_levels, dtype=float)
    n_v, n_l = cells
    src, dst = network.endpoints()
    term_arc, term_res, term_sign = [], [], []
    for k in range(A):
        for res, sign in ((src[k], 1), (dst[k], -1)):
            if res >= 0:
                term_arc.append(k)
                term_res.append(res)
                term_sign.append(sign)
    term_arc = np.array(term_arc, dtype=int)
    term_res = np.array(term_res, dtype=int)
    term_sign = np.array(term_sign, dtype=int)
    K = term_arc.size

    nxt = 0
    level_idx = np.arange((H + 1) * N).reshape(H + 1, N)
    nxt += level_idx.size
    flow_idx = nxt + np.arange(H * A).reshape(H, A)
    nxt += flow_idx.size
    chi_idx = nxt + np.arange(H * K).reshape(H, K)
    nxt += chi_idx.size
    sv, sl = selector_count(n_v), selector_count(n_l)
    fbin_idx = nxt + np.arange(H * A * sv).reshape(H, A, sv)
    nxt += fbin_idx.size
    lbin_idx = nxt + np.arange(H * N * sl).reshape(H, N, sl)
    nxt += lbin_idx.size
    n = nxt

    c = np.zeros(n)
    alpha, beta = network.alphas, network.betas
    c[flow_idx] = p[:, None] * alpha[None, :]
    c[chi_idx] = p[:, None] * (term_sign * beta[term_arc])[None, :]
    if tv.size:
        c[level_idx[H]] -= tv

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[level_idx[1:]] = network.level_min
    ub[level_idx[1:]] = network.level_max
    lb[flow_idx] = network.flow_min
    ub[flow_idx] = network.flow_max
    lb[fbin_idx], ub[fbin_idx] = 0.0, 1.0
    lb[lbin_idx], ub[lbin_idx] = 0.0, 1.0

    eq = _Rows()
    coupling = eq.add_block(level_idx[0][:, None], np.ones((N, 1)), np.asarray(start_levels, dtype=float))
    D = network.level_change_matrix()
    dyn_first = None
    for t in range(H):
        cols = [level_idx[t][:, None], level_idx[t + 1][:, None]]
        vals = [np.ones((N, 1)), -np.ones((N, 1))]
        cols.append(np.broadcast_to(flow_idx[t][None, :], (N, A)))
        vals.append(D)
        rows = eq.add_block(np.hstack(cols), np.hstack(vals), np.zeros(N))
        if t == 0:
            dyn_first = rows

    ineq = _Rows()
    first_in = []
    fmin, fmax = network.flow_min, network.flow_max
    for t in range(H):
        llo, lhi = level_bounds(network, anchor_offset + t, anchor, tightened)
        for q in range(K):
            k, i = term_arc[q], term_res[q]
            box = Box(fmin[k], fmax[k], llo[i], lhi[i])
            vcol, lcol, xcol = flow_idx[t, k], level_idx[t, i], chi_idx[t, q]
            if n_v == 1 and n_l == 1:
                env = mccormick_envelope(box)
                keep = slice(None)
                if prune:
                    w = c[xcol]
                    keep = slice(0, 2) if w > 0 else slice(2, 4) if w < 0 else slice(0, 0)
                coef, rhs = env.coef[keep], env.rhs[keep]
                rows = ineq.add_block(np.tile([vcol, lcol, xcol], (len(rhs), 1)), coef, rhs)
            else:
                rows = _add_multicell_rows(ineq, box, n_v, n_l, vcol, lcol, xcol,
                                           fbin_idx[t, k], lbin_idx[t, i], lb, ub)
            if t == 0:
                first_in.append(rows)
        if n_v > 1 or n_l > 1:
            for k in range(A):
                _add_interval_rows(ineq, flow_idx[t, k], fbin_idx[t, k], fmin[k], fmax[k], n_v)
            for i in range(N):
                _add_interval_rows(ineq, level_idx[t, i], lbin_idx[t, i], llo[i], lhi[i], n_l)

    A_eq, b_eq = eq.matrix(n)
    A_in, b_in = ineq.matrix(n)
    layout = HorizonLayout(H, N, A, level_idx, flow_idx, chi_idx, term_arc, term_res, term_sign,
                           coupling, dyn_first if dyn_first is not None else np.zeros(0, int),
                           np.concatenate(first_in) if first_in else np.zeros(0, int),
                           np.concatenate([fbin_idx.ravel(), lbin_idx.ravel()]))
    lp = LpProblem(c, A_eq, b_eq, A_in, b_in, lb, ub,
                   var_tags={"levels": level_idx, "flows": flow_idx, "chi": chi_idx,
                             "start_levels": level_idx[0]},
                   row_tags={"eq:coupling": coupling,
                             "eq:dynamics_first": layout.first_step_eq_rows,
                             "in:envelope_first": layout.first_step_in_rows})
    if layout.binary_idx.size:
        return MilpProblem(lp, layout.binary_idx), layout
    return lp, layout


def _indicator(bin_cols: np.ndarray, n: int, k: int):
    """Affine form (const, {col: coef}) of 'interval k is selected'."""
    if n == 1:
        return 1.0, {}
    if n == 2:
        return (0.0, {int(bin_cols[0]): 1.0}) if k == 1 else (1.0, {int(bin_cols[0]): -1.0})
    return 0.0, {int(bin_cols[k]): 1.0}


def _add_multicell_rows(ineq: _Rows, box: Box, n_v, n_l, vcol, lcol, xcol, vbins, lbins, lb, ub):
    part = multicell_partition(box, n_v, n_l)
    chi_lo, chi_hi = box.chi_range
    lb[xcol] = max(lb[xcol], chi_lo)
    ub[xcol] = min(ub[xcol], chi_hi)
    added = []
    for idx, cell in enumerate(part.cells):
        cv, tv = _indicator(vbins, n_v, cell.v_index)
        cl, tl = _indicator(lbins, n_l, cell.l_index)
        for r in range(4):
            M = part.big_m[idx, r]
            # coef.(V,l,chi) <= rhs + M * (2 - Iv - Il)
            cols = {vcol: cell.rows.coef[r, 0], lcol: cell.rows.coef[r, 1], xcol: cell.rows.coef[r, 2]}
            for col, coef in list(tv.items()) + list(tl.items()):
                cols[col] = cols.get(col, 0.0) + M * coef
            rhs = cell.rows.rhs[r] + M * (2.0 - cv - cl)
            keys = np.array(list(cols.keys()))
            added.append(ineq.add_block(keys[None, :], np.array(list(cols.values()))[None, :], [rhs]))
    return np.concatenate(added)


def _add_interval_rows(ineq: _Rows, col, bins, lo, hi, n):
    """Force a variable into its selected interval; one-hot rows for n > 2."""
    if n == 1:
        return
    edges = np.linspace(lo, hi, n + 1)
    for k in range(n):
        const, terms = _indicator(bins, n, k)
        # x >= edges[k] - (edges[k] - lo)(1 - I)   and   x <= edges[k+1] + (hi - edges[k+1])(1 - I)
        mlo, mhi = edges[k] - lo, hi - edges[k + 1]
        c1 = {col: -1.0}
        for b, coef in terms.items():
            c1[b] = c1.get(b, 0.0) + mlo * coef
        ineq.add_block(np.array(list(c1))[None, :], np.array(list(c1.values()))[None, :],
                       [-edges[k] + mlo - mlo * const])
        c2 = {col: 1.0}
        for b, coef in terms.items():
            c2[b] = c2.get(b, 0.0) + mhi * coef
        ineq.add_block(np.array(list(c2))[None, :], np.array(list(c2.values()))[None, :],
                       [edges[k + 1] + mhi - mhi * const])
    if n > 2:
        cols = np.array([int(b) for b in bins])
        ineq.add_block(cols[None, :], np.ones((1, n)), [1.0])
        ineq.add_block(cols[None, :], -np.ones((1, n)), [-1.0])
