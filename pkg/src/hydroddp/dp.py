"""Grid dynamic programming over reservoir levels with the exact bilinear model.

Levels are sampled on an equally spaced grid per reservoir; the value of the
next step is read by multilinear interpolation.  Inputs are enumerated from
a finite set of joint flow vectors (see ``Grid.flow_combos``).
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .model import PriceSeries, ReservoirNetwork, Trajectory, exact_objective

log = logging.getLogger(__name__)

LEVEL_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Level samples per reservoir and flow samples per input dimension.

    With ``pair_devices`` (default) a reversible unit, i.e. two arcs with
    swapped endpoints and zero minimum flow, is one input dimension: its
    ``flow_points`` samples are the union of a generating and a pumping
    sweep that share the zero point, so the unit never runs both ways at
    once.  Without pairing every arc gets ``flow_points`` samples and the
    joint inputs are the full product over arcs.
    """

    level_points: int = 32
    flow_points: int = 32
    pair_devices: bool = True

    def __post_init__(self):
        if self.level_points < 2 or self.flow_points < 2:
            raise ValueError("grids need at least two points per dimension")

    def level_axes(self, network: ReservoirNetwork) -> list[np.ndarray]:
        return [np.linspace(r.level_min, r.level_max, self.level_points) for r in network.reservoirs]

    def arc_samples(self, network: ReservoirNetwork, k: int, count: int | None = None) -> np.ndarray:
        a = network.arcs[k]
        return np.linspace(a.flow_min, a.flow_max, count or self.flow_points)

    def flow_combos(self, network: ReservoirNetwork) -> np.ndarray:
        """(K, arcs) array of joint flow vectors."""
        dims = []
        if self.pair_devices:
            for fwd, rev in network.reverse_pairs():
                if rev is None or network.arcs[fwd].flow_min > 0 or network.arcs[rev].flow_min > 0:
                    for k in (fwd, rev):
                        if k is not None:
                            dims.append([(k, v) for v in self.arc_samples(network, k)])
                    continue
                m_f = max(2, self.flow_points // 2 + 1)
                m_r = max(2, self.flow_points - self.flow_points // 2)
                opts = [((fwd, v), (rev, 0.0)) for v in self.arc_samples(network, fwd, m_f)]
                opts += [((fwd, 0.0), (rev, v)) for v in self.arc_samples(network, rev, m_r)[1:]]
                dims.append(opts)
        else:
            for k in range(network.n_arcs):
                dims.append([(k, v) for v in self.arc_samples(network, k)])
        combos = []
        for choice in itertools.product(*dims):
            row = np.zeros(network.n_arcs)
            for item in choice:
                pairs = item if isinstance(item[0], tuple) else (item,)
                for k, v in pairs:
                    row[k] = v
            combos.append(row)
        return np.array(combos).reshape(-1, network.n_arcs)

    def refined(self) -> "Grid":
        return Grid(2 * self.level_points - 1, 2 * self.flow_points - 1, self.pair_devices)


@numba.njit(cache=True)
def _interp(values, lo, step, npts, strides, x, fr):
    """Multilinear interpolation of a flattened grid array at point ``x``;
    ``fr`` is scratch space of the same length."""
    N = x.shape[0]
    base = 0
    for d in range(N):
        u = (x[d] - lo[d]) / step[d]
        i = int(math.floor(u))
        if i < 0:
            i = 0
        elif i > npts[d] - 2:
            i = npts[d] - 2
        f = u - i
        if f < 0.0:
            f = 0.0
        elif f > 1.0:
            f = 1.0
        fr[d] = f
        base += i * strides[d]
    total = 0.0
    for corner in range(1 << N):
        w = 1.0
        off = 0
        for d in range(N):
            if (corner >> d) & 1:
                w *= fr[d]
                off += strides[d]
            else:
                w *= 1.0 - fr[d]
        if w > 0.0:
            v = values[base + off]
            if v == np.inf:
                return np.inf
            total += w * v
    return total


@numba.njit(cache=True)
def _bellman(values_next, lo, step, npts, strides, states, dlev, ca, wl, price, lmin, lmax, tol):
    S = states.shape[0]
    K = dlev.shape[0]
    N = states.shape[1]
    out = np.full(S, np.inf)
    arg = np.full(S, -1, dtype=np.int64)
    nxt = np.empty(N)
    fr = np.empty(N)
    for s in range(S):
        best = np.inf
        barg = -1
        for k in range(K):
            ok = True
            for d in range(N):
                v = states[s, d] + dlev[k, d]
                if v < lmin[d] - tol or v > lmax[d] + tol:
                    ok = False
                    break
                if v < lmin[d]:
                    v = lmin[d]
                elif v > lmax[d]:
                    v = lmax[d]
                nxt[d] = v
            if not ok:
                continue
            cost = ca[k]
            for d in range(N):
                cost += wl[k, d] * states[s, d]
            val = price * cost + _interp(values_next, lo, step, npts, strides, nxt, fr)
            if val < best:
                best = val
                barg = k
        out[s] = best
        arg[s] = barg
    return out, arg


@numba.njit(cache=True)
def _bellman_grid(values_next, npts, strides, idx, states, q, ca, wl, price, tolu):
    """Bellman update at grid nodes.

    Moving by a fixed level change shifts every node by the same fraction of
    a cell, so ``q`` (level change over spacing, per combo) replaces the
    per-evaluation division and floor of the generic kernel.
    """
    S = idx.shape[0]
    K = q.shape[0]
    N = idx.shape[1]
    out = np.full(S, np.inf)
    arg = np.full(S, -1, dtype=np.int64)
    fr = np.empty(N)
    for s in range(S):
        best = np.inf
        barg = -1
        for k in range(K):
            base = 0
            ok = True
            for d in range(N):
                u = idx[s, d] + q[k, d]
                top = npts[d] - 1
                if u < -tolu[d] or u > top + tolu[d]:
                    ok = False
                    break
                if u < 0.0:
                    u = 0.0
                elif u > top:
                    u = top
                i = int(u)
                if i > top - 1:
                    i = top - 1
                fr[d] = u - i
                base += i * strides[d]
            if not ok:
                continue
            cost = ca[k]
            for d in range(N):
                cost += wl[k, d] * states[s, d]
            total = 0.0
            for corner in range(1 << N):
                w = 1.0
                off = 0
                for d in range(N):
                    if (corner >> d) & 1:
                        w *= fr[d]
                        off += strides[d]
                    else:
                        w *= 1.0 - fr[d]
                if w > 0.0:
                    total += w * values_next[base + off]
            val = price * cost + total
            if val < best:
                best = val
                barg = k
        out[s] = best
        arg[s] = barg
    return out, arg


@dataclass
class StageData:
    """Per-combo affine cost pieces shared by every step.

    Stage cost of combo k at levels l is ``price * (ca[k] + wl[k] @ l)``.
    """

    combos: np.ndarray
    dlev: np.ndarray
    ca: np.ndarray
    wl: np.ndarray

    @classmethod
    def build(cls, network: ReservoirNetwork, combos: np.ndarray) -> "StageData":
        D = network.level_change_matrix()
        Hm = network.head_matrix()
        dlev = combos @ D.T
        ca = combos @ network.alphas
        wl = (combos * network.betas) @ Hm
        return cls(np.ascontiguousarray(combos), np.ascontiguousarray(dlev), ca, np.ascontiguousarray(wl))


@dataclass
class ValueTable:
    """Cost-to-go on the level grid for steps ``t_start .. t_end``.

    ``values[k]`` holds the value at absolute step ``t_start + k`` with
    reservoir axes in network order; ``policy[k]`` the argmin combo index.
    """

    t_start: int
    t_end: int
    axes: list
    values: list
    policy: list
    stage: StageData
    grid: Grid
    unreachable: list = field(default_factory=list)

    def _geometry(self):
        lo = np.array([a[0] for a in self.axes])
        step = np.array([a[1] - a[0] for a in self.axes])
        npts = np.array([len(a) for a in self.axes], dtype=np.int64)
        strides = np.ones(len(self.axes), dtype=np.int64)
        for d in range(len(self.axes) - 2, -1, -1):
            strides[d] = strides[d + 1] * npts[d + 1]
        return lo, step, npts, strides

    def value(self, t_abs: int, levels) -> float:
        """Interpolated value at absolute step ``t_abs``."""
        lo, step, npts, strides = self._geometry()
        v = self.values[t_abs - self.t_start].ravel()
        x = np.asarray(levels, dtype=float)
        return float(_interp(v, lo, step, npts, strides, x, np.empty_like(x)))

    def greedy(self, t_abs: int, levels, price: float, network: ReservoirNetwork):
        """Best combo at an arbitrary (off-grid) state; returns (value, index)."""
        lo, step, npts, strides = self._geometry()
        v = self.values[t_abs + 1 - self.t_start].ravel()
        state = np.asarray(levels, dtype=float).reshape(1, -1)
        out, arg = _bellman(v, lo, step, npts, strides, state, self.stage.dlev, self.stage.ca,
                            self.stage.wl, float(price), network.level_min, network.level_max, LEVEL_TOL)
        return float(out[0]), int(arg[0])


def grid_states(axes) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.ascontiguousarray(np.stack([m.ravel() for m in mesh], axis=1))


def solve_dp(network: ReservoirNetwork, prices: PriceSeries, t_start: int, t_end: int,
             terminal_fn: Callable[[np.ndarray], np.ndarray], grid: Grid = Grid(),
             start_levels=None, node_map: Callable = None) -> tuple[ValueTable, float]:
    """Backward induction on the level grid.

    ``terminal_fn`` maps an (S, N) array of level vectors to S values.
    ``node_map`` optionally replaces the serial per-stage sweep: it is called
    as ``node_map(fn, chunks)`` and must return results in chunk order.
    Returns the table and the value at ``start_levels`` (default: the
    network's initial levels), computed by one exact-state lookahead step.
    """
    if t_end < t_start:
        raise ValueError("t_end must not precede t_start")
    start = network.initial_levels if start_levels is None else np.asarray(start_levels, dtype=float)
    axes = grid.level_axes(network)
    states = grid_states(axes)
    shape = tuple(len(a) for a in axes)
    stage = StageData.build(network, grid.flow_combos(network))
    p = prices.prices
    terminal = np.asarray(terminal_fn(states), dtype=float).reshape(shape)
    table = ValueTable(t_start, t_end, axes, [None] * (t_end - t_start + 1),
                       [None] * (t_end - t_start), stage, grid)
    table.values[-1] = terminal
    lo, step, npts, strides = table._geometry()
    idx = np.ascontiguousarray(np.round((states - lo) / step))
    q = np.ascontiguousarray(stage.dlev / step)
    tolu = LEVEL_TOL / step
    for t in range(t_end - 1, t_start - 1, -1):
        nxt = table.values[t + 1 - t_start].ravel()

        def sweep(rows, nxt=nxt, t=t):
            return _bellman_grid(nxt, npts, strides, idx[rows], states[rows], q, stage.ca, stage.wl,
                                 float(p[t]), tolu)

        if node_map is None:
            vals, arg = sweep(slice(None))
        else:
            chunks = np.array_split(np.arange(len(states)), 8)
            parts = list(node_map(sweep, chunks))
            vals = np.concatenate([q[0] for q in parts])
            arg = np.concatenate([q[1] for q in parts])
        if np.isinf(vals).any():
            table.unreachable.append(t)
            log.warning("step %d: %d grid nodes have no feasible input", t, int(np.isinf(vals).sum()))
        table.values[t - t_start] = vals.reshape(shape)
        table.policy[t - t_start] = arg.reshape(shape)
    if t_end == t_start:
        value = float(np.asarray(terminal_fn(start.reshape(1, -1))).ravel()[0])
    else:
        value, _ = table.greedy(t_start, start, p[t_start], network)
    return table, value


@dataclass
class PolicyRollout:
    trajectory: Trajectory
    clip_distance: np.ndarray  # per step, meters
    warnings: list


def extract_policy_trajectory(table: ValueTable, start_levels, network: ReservoirNetwork,
                              prices: PriceSeries, t_from: int | None = None,
                              t_to: int | None = None) -> PolicyRollout:
    """Forward pass: at each exact state pick the lookahead argmin, step the
    exact dynamics and clip to the level bounds."""
    t_from = table.t_start if t_from is None else t_from
    t_to = table.t_end if t_to is None else t_to
    if not table.t_start <= t_from <= t_to <= table.t_end:
        raise ValueError("requested window outside the table")
    D = network.level_change_matrix()
    lmin, lmax = network.level_min, network.level_max
    H = t_to - t_from
    levels = np.empty((H + 1, network.n_res))
    flows = np.zeros((H, network.n_arcs))
    clip = np.zeros(H)
    warnings = []
    levels[0] = start_levels
    spacing = min(a[1] - a[0] for a in table.axes)
    for h in range(H):
        t = t_from + h
        _, k = table.greedy(t, levels[h], prices.prices[t], network)
        if k < 0:
            raise RuntimeError(f"no feasible input at step {t} from levels {levels[h]}")
        flows[h] = table.stage.combos[k]
        nxt = levels[h] + D @ flows[h]
        clipped = np.clip(nxt, lmin, lmax)
        clip[h] = float(np.max(np.abs(clipped - nxt)))
        if clip[h] > spacing:
            warnings.append(f"step {t}: clipped {clip[h]:.3g} m, more than one grid spacing")
        levels[h + 1] = clipped
    tv = prices.terminal_values if t_to == prices.T else np.zeros(0)
    traj = Trajectory(levels, flows, math.nan, H)
    obj = exact_objective(traj, PriceSeries(prices.prices[t_from:t_to], tv), network)
    return PolicyRollout(Trajectory(levels, flows, obj, H), clip, warnings)


def linear_terminal(values) -> Callable[[np.ndarray], np.ndarray]:
    """Terminal function ``-values @ l`` (stored water as a credit)."""
    v = np.asarray(values, dtype=float)
    return lambda L: -(np.atleast_2d(L) @ v) if v.size else np.zeros(np.atleast_2d(L).shape[0])


def refinement_epsilon(network, prices, t_start, t_end, terminal_fn, grid: Grid, start_levels=None):
    """Change in the computed value under one grid refinement (an estimate of
    the first-stage solve tolerance, not a certificate)."""
    _, coarse = solve_dp(network, prices, t_start, t_end, terminal_fn, grid, start_levels)
    _, fine = solve_dp(network, prices, t_start, t_end, terminal_fn, grid.refined(), start_levels)
    return abs(coarse - fine), coarse, fine


ENUMERATION_MAX_T = 8


def enumerate_optimum(network: ReservoirNetwork, prices: PriceSeries, grid: Grid, start_levels=None,
                      max_nodes: int = 20_000_000) -> tuple[float, np.ndarray]:
    """Exhaustive search over all sequences of the grid's flow combinations
    with exact dynamics and no interpolation.

    Only for horizons of at most ``ENUMERATION_MAX_T`` steps.  Returns the
    best exact objective (terminal credit included) and its flow sequence.
    """
    T = prices.T
    if T > ENUMERATION_MAX_T:
        raise ValueError(f"enumeration is limited to T <= {ENUMERATION_MAX_T}, got {T}")
    combos = grid.flow_combos(network)
    D = network.level_change_matrix()
    H = network.head_matrix()
    dlev = combos @ D.T
    lmin, lmax = network.level_min - LEVEL_TOL, network.level_max + LEVEL_TOL
    start = network.initial_levels if start_levels is None else np.asarray(start_levels, dtype=float)
    levels = start.reshape(1, -1)
    cost = np.zeros(1)
    paths = np.zeros((1, 0), dtype=np.int64)
    for t in range(T):
        if levels.shape[0] * len(combos) > max_nodes:
            raise ValueError(f"enumeration tree exceeds {max_nodes} nodes at step {t}")
        energy = network.alphas + network.betas * (levels @ H.T)  # (S, arcs)
        step = prices.prices[t] * (energy @ combos.T)  # (S, K)
        nxt = levels[:, None, :] + dlev[None, :, :]
        ok = np.all((nxt >= lmin) & (nxt <= lmax), axis=2)
        s_idx, k_idx = np.nonzero(ok)
        levels = nxt[s_idx, k_idx]
        cost = cost[s_idx] + step[s_idx, k_idx]
        paths = np.column_stack([paths[s_idx], k_idx])
    if prices.terminal_values.size:
        cost = cost - levels @ prices.terminal_values
    best = int(np.argmin(cost))
    return float(cost[best]), combos[paths[best]]
