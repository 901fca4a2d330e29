"""Cascaded reservoir network: physical data, bilinear dynamics and costs.

Levels are in meters above each reservoir's bottom, flows in m^3 per hourly
step, prices in EUR/kWh.  The infinite basin is not a state: arcs into or
out of it reference ``BASIN`` and its level is identically zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

BASIN = -1
K_H2O = 0.002725  # kWh per (m * m^3): rho * g / 3.6e6
REL_TOL = 1e-6


class ModelError(ValueError):
    """Raised when network data violate a physical invariant."""


class Direction(str, Enum):
    GENERATE = "generate"
    PUMP = "pump"


@dataclass(frozen=True)
class Reservoir:
    id: int
    capacity: float
    level_min: float
    level_max: float
    gamma: float
    bottom_elevation: float
    name: str = ""

    def __post_init__(self):
        if self.level_min > self.level_max:
            raise ModelError(f"reservoir {self.id}: level_min > level_max")
        if not self.gamma > 0:
            raise ModelError(f"reservoir {self.id}: gamma must be positive")
        expected = self.gamma * (self.level_max - self.level_min)
        if abs(expected - self.capacity) > REL_TOL * max(abs(self.capacity), 1.0):
            raise ModelError(
                f"reservoir {self.id}: capacity {self.capacity} != gamma * level range {expected}"
            )


@dataclass(frozen=True)
class Arc:
    source: int
    dest: int
    alpha: float
    beta: float
    flow_min: float
    flow_max: float
    power_rating: float
    efficiency: float = 1.0
    direction: Direction = Direction.GENERATE

    def __post_init__(self):
        if not 0 <= self.flow_min <= self.flow_max:
            raise ModelError(f"arc {self.source}->{self.dest}: need 0 <= flow_min <= flow_max")
        if self.direction == Direction.GENERATE and not (self.alpha <= 0 and self.beta < 0):
            raise ModelError(f"arc {self.source}->{self.dest}: generation arc needs alpha <= 0, beta < 0")
        if self.direction == Direction.PUMP and not (self.alpha >= 0 and self.beta < 0):
            raise ModelError(f"arc {self.source}->{self.dest}: pumping arc needs alpha >= 0, beta < 0")

    def energy(self, level_src: float, level_dst: float) -> float:
        """kWh per m^3 moved; negative when generating."""
        return self.alpha + self.beta * (level_src - level_dst)


@dataclass(frozen=True)
class ReservoirNetwork:
    reservoirs: tuple[Reservoir, ...]
    arcs: tuple[Arc, ...]
    initial_levels: np.ndarray
    k_h2o: float = K_H2O
    basin_drop: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "reservoirs", tuple(self.reservoirs))
        object.__setattr__(self, "arcs", tuple(self.arcs))
        init = np.asarray(self.initial_levels, dtype=float).copy()
        init.setflags(write=False)
        object.__setattr__(self, "initial_levels", init)
        ids = [r.id for r in self.reservoirs]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate reservoir ids")
        if BASIN in ids:
            raise ModelError(f"reservoir id {BASIN} is reserved for the basin")
        if init.shape != (len(ids),):
            raise ModelError("initial_levels needs one entry per reservoir")
        for r, l0 in zip(self.reservoirs, init):
            if not r.level_min - 1e-12 <= l0 <= r.level_max + 1e-12:
                raise ModelError(f"reservoir {r.id}: initial level {l0} outside bounds")
        for a in self.arcs:
            for end in (a.source, a.dest):
                if end != BASIN and end not in ids:
                    raise ModelError(f"arc {a.source}->{a.dest} references unknown reservoir {end}")
            if a.source == a.dest:
                raise ModelError("self-loop arc")

    # -- index helpers ---------------------------------------------------
    @property
    def n_res(self) -> int:
        return len(self.reservoirs)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def index(self, rid: int) -> int:
        """Position of reservoir ``rid``; BASIN maps to -1."""
        if rid == BASIN:
            return -1
        for k, r in enumerate(self.reservoirs):
            if r.id == rid:
                return k
        raise KeyError(rid)

    @property
    def level_min(self) -> np.ndarray:
        return np.array([r.level_min for r in self.reservoirs])

    @property
    def level_max(self) -> np.ndarray:
        return np.array([r.level_max for r in self.reservoirs])

    @property
    def gammas(self) -> np.ndarray:
        return np.array([r.gamma for r in self.reservoirs])

    @property
    def flow_min(self) -> np.ndarray:
        return np.array([a.flow_min for a in self.arcs])

    @property
    def flow_max(self) -> np.ndarray:
        return np.array([a.flow_max for a in self.arcs])

    @property
    def alphas(self) -> np.ndarray:
        return np.array([a.alpha for a in self.arcs])

    @property
    def betas(self) -> np.ndarray:
        return np.array([a.beta for a in self.arcs])

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """(source index, dest index) per arc, -1 for the basin."""
        src = np.array([self.index(a.source) for a in self.arcs], dtype=int)
        dst = np.array([self.index(a.dest) for a in self.arcs], dtype=int)
        return src, dst

    def level_change_matrix(self) -> np.ndarray:
        """D with ``levels_next = levels + D @ flows``."""
        D = np.zeros((self.n_res, self.n_arcs))
        src, dst = self.endpoints()
        g = self.gammas
        for k in range(self.n_arcs):
            if src[k] >= 0:
                D[src[k], k] -= 1.0 / g[src[k]]
            if dst[k] >= 0:
                D[dst[k], k] += 1.0 / g[dst[k]]
        return D

    def head_matrix(self) -> np.ndarray:
        """H with ``(level_src - level_dst)`` per arc equal to ``H @ levels``."""
        H = np.zeros((self.n_arcs, self.n_res))
        src, dst = self.endpoints()
        for k in range(self.n_arcs):
            if src[k] >= 0:
                H[k, src[k]] += 1.0
            if dst[k] >= 0:
                H[k, dst[k]] -= 1.0
        return H

    def elevation(self, idx: int) -> float:
        return 0.0 if idx < 0 else self.reservoirs[idx].bottom_elevation

    def reverse_pairs(self) -> list[tuple[int, int | None]]:
        """Group arcs into devices: (forward arc, reverse arc or None).

        A reversible pump/turbine is two arcs with swapped endpoints; the
        generating one is listed first.
        """
        used = set()
        devices = []
        for k, a in enumerate(self.arcs):
            if k in used:
                continue
            partner = None
            for m in range(k + 1, self.n_arcs):
                b = self.arcs[m]
                if m not in used and b.source == a.dest and b.dest == a.source:
                    partner = m
                    break
            used.add(k)
            if partner is None:
                devices.append((k, None))
                continue
            used.add(partner)
            if self.arcs[partner].direction == Direction.GENERATE and a.direction == Direction.PUMP:
                devices.append((partner, k))
            else:
                devices.append((k, partner))
        return devices


@dataclass(frozen=True)
class PriceSeries:
    """Hourly prices and terminal water values (EUR per meter of level).

    The terminal value is a credit: stored water lowers the objective by
    ``terminal_values @ levels_T``.
    """

    prices: np.ndarray
    terminal_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float).copy()
        if p.ndim != 1 or not np.all(np.isfinite(p)):
            raise ModelError("prices must be a finite 1-d sequence")
        p.setflags(write=False)
        tv = np.asarray(self.terminal_values, dtype=float).copy()
        tv.setflags(write=False)
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "terminal_values", tv)

    @property
    def T(self) -> int:
        return len(self.prices)

    def window(self, start: int, stop: int | None = None) -> "PriceSeries":
        return PriceSeries(self.prices[start:stop], self.terminal_values)

    def with_terminal(self, values) -> "PriceSeries":
        return PriceSeries(self.prices, values)


@dataclass(frozen=True)
class Trajectory:
    levels: np.ndarray  # (T+1, N)
    flows: np.ndarray  # (T, arcs)
    objective: float = math.nan
    stage_boundary: int = 0

    @property
    def T(self) -> int:
        return self.flows.shape[0]


# -- coefficient derivation ---------------------------------------------------
def derive_arc_coefficients(k_h2o: float, h0: float, mu: float, direction) -> tuple[float, float]:
    """Energy coefficients (alpha, beta) for ``E = alpha + beta * (l_src - l_dst)``.

    ``h0`` is the bottom-to-bottom height the water falls (GENERATE) or is
    lifted (PUMP).  In both cases raising the source level relative to the
    destination lowers the energy balance, so beta is negative for pumps too.
    """
    direction = Direction(direction)
    if not mu > 0 or mu > 1:
        raise ModelError(f"efficiency must lie in (0, 1], got {mu}")
    if not k_h2o > 0:
        raise ModelError("k_h2o must be positive")
    if h0 < 0:
        raise ModelError("h0 must be nonnegative")
    if direction == Direction.GENERATE:
        return -k_h2o * h0 * mu, -k_h2o * mu
    return k_h2o * h0 / mu, -k_h2o / mu


def derive_flow_bound(arc: Arc, power_rating: float, initial_head: float) -> float:
    """Flow (m^3/h) that draws or produces ``power_rating`` kW at the given
    source-minus-destination level difference."""
    if power_rating == 0:
        return 0.0
    e = abs(arc.alpha + arc.beta * initial_head)
    if e == 0:
        raise ModelError(f"arc {arc.source}->{arc.dest} has zero energy density")
    return power_rating / e


def make_device_arc(
    source: int,
    dest: int,
    elevations: dict[int, float],
    levels: dict[int, float],
    power_kw: float,
    mu: float,
    k_h2o: float = K_H2O,
) -> Arc:
    """Build an arc with coefficients and flow bound derived from geometry.

    Direction is inferred from bottom elevations (downhill generates).
    """
    zs, zd = elevations[source], elevations[dest]
    direction = Direction.GENERATE if zs >= zd else Direction.PUMP
    alpha, beta = derive_arc_coefficients(k_h2o, abs(zs - zd), mu, direction)
    proto = Arc(source, dest, alpha, beta, 0.0, 0.0, power_kw, mu, direction)
    head = levels[source] - levels[dest]
    vmax = derive_flow_bound(proto, power_kw, head)
    return Arc(source, dest, alpha, beta, 0.0, vmax, power_kw, mu, direction)


def build_network(res_specs: Sequence[dict], devices: Sequence[dict], k_h2o: float = K_H2O,
                  basin_drop: float = 0.0) -> ReservoirNetwork:
    """Assemble a network from plain parameters.

    ``res_specs``: dicts with id, capacity, level_min, level_max, bottom_elevation,
    initial_level and optionally gamma and name.  ``devices``: dicts with
    source, dest, power_kw, efficiency and mode (generate, pump or reversible).
    """
    reservoirs = []
    for s in res_specs:
        lo, hi = float(s.get("level_min", 0.0)), float(s["level_max"])
        gamma = s.get("gamma")
        if gamma is None:
            if hi <= lo:
                raise ModelError(f"reservoir {s['id']}: cannot derive gamma from a zero level range")
            gamma = s["capacity"] / (hi - lo)
        reservoirs.append(Reservoir(int(s["id"]), float(s["capacity"]), lo, hi, float(gamma),
                                    float(s["bottom_elevation"]), s.get("name", "")))
    elev = {r.id: r.bottom_elevation for r in reservoirs}
    elev[BASIN] = 0.0
    init = {int(s["id"]): float(s["initial_level"]) for s in res_specs}
    init[BASIN] = 0.0
    arcs = []
    for d in devices:
        src, dst = int(d["source"]), int(d["dest"])
        mode = d.get("mode", "reversible")
        pairs = [(src, dst), (dst, src)] if mode == "reversible" else [(src, dst)]
        for s, t in pairs:
            arc = make_device_arc(s, t, elev, init, float(d["power_kw"]), float(d["efficiency"]), k_h2o)
            if mode in ("generate", "pump") and arc.direction.value != mode:
                raise ModelError(f"arc {s}->{t}: mode {mode} contradicts elevations")
            arcs.append(arc)
    return ReservoirNetwork(tuple(reservoirs), tuple(arcs),
                            np.array([init[r.id] for r in reservoirs]), k_h2o, basin_drop)


# -- presets ------------------------------------------------------------------
def two_reservoir() -> ReservoirNetwork:
    """Upper reservoir a (id 0) over lower reservoir b (id 1) over the basin.

    Both hold 33e6 m^3, bottoms 200 m apart, basin 300 m below b's bottom,
    100 MW reversible units at 90 % one-way efficiency, half full at start.
    Arc order: a->b, b->a, b->basin, basin->b.
    """
    res = [
        dict(id=0, name="a", capacity=33e6, level_min=0.0, level_max=85.0,
             bottom_elevation=500.0, initial_level=42.5),
        dict(id=1, name="b", capacity=33e6, level_min=0.0, level_max=100.0,
             bottom_elevation=300.0, initial_level=50.0),
    ]
    devs = [
        dict(source=0, dest=1, power_kw=100_000.0, efficiency=0.9, mode="reversible"),
        dict(source=1, dest=BASIN, power_kw=100_000.0, efficiency=0.9, mode="reversible"),
    ]
    return build_network(res, devs, basin_drop=300.0)


def three_reservoir() -> ReservoirNetwork:
    """Two-reservoir preset plus reservoir c (id 2), a copy of a stacked 200 m
    above it and linked to a by another 100 MW reversible unit."""
    res = [
        dict(id=0, name="a", capacity=33e6, level_min=0.0, level_max=85.0,
             bottom_elevation=500.0, initial_level=42.5),
        dict(id=1, name="b", capacity=33e6, level_min=0.0, level_max=100.0,
             bottom_elevation=300.0, initial_level=50.0),
        dict(id=2, name="c", capacity=33e6, level_min=0.0, level_max=85.0,
             bottom_elevation=700.0, initial_level=42.5),
    ]
    devs = [
        dict(source=0, dest=1, power_kw=100_000.0, efficiency=0.9, mode="reversible"),
        dict(source=1, dest=BASIN, power_kw=100_000.0, efficiency=0.9, mode="reversible"),
        dict(source=2, dest=0, power_kw=100_000.0, efficiency=0.9, mode="reversible"),
    ]
    return build_network(res, devs, basin_drop=300.0)


# -- dynamics and cost ----------------------------------------------------------
def step_dynamics(levels_t, flows_t, network: ReservoirNetwork) -> np.ndarray:
    return np.asarray(levels_t, dtype=float) + network.level_change_matrix() @ np.asarray(flows_t, dtype=float)


def simulate(levels0, flows, network: ReservoirNetwork) -> np.ndarray:
    """Roll the dynamics forward; returns the (T+1, N) level matrix."""
    flows = np.atleast_2d(np.asarray(flows, dtype=float))
    D = network.level_change_matrix()
    out = np.empty((flows.shape[0] + 1, network.n_res))
    out[0] = levels0
    for t in range(flows.shape[0]):
        out[t + 1] = out[t] + D @ flows[t]
    return out


def exact_stage_cost(levels_t, flows_t, price_t: float, network: ReservoirNetwork) -> float:
    heads = network.head_matrix() @ np.asarray(levels_t, dtype=float)
    energy = network.alphas + network.betas * heads
    return float(price_t * np.dot(np.asarray(flows_t, dtype=float), energy))


def exact_stage_costs(levels, flows, prices, network: ReservoirNetwork) -> np.ndarray:
    """Vectorised per-step exact costs for a (T+1, N) / (T, arcs) trajectory."""
    levels = np.asarray(levels, dtype=float)
    flows = np.asarray(flows, dtype=float)
    T = flows.shape[0]
    heads = levels[:T] @ network.head_matrix().T
    energy = network.alphas + network.betas * heads
    return np.asarray(prices[:T]) * np.einsum("ta,ta->t", flows, energy)


def terminal_credit(levels_T, prices: PriceSeries) -> float:
    tv = prices.terminal_values
    if tv.size == 0:
        return 0.0
    return -float(np.dot(tv, levels_T))


def exact_objective(traj: Trajectory, prices: PriceSeries, network: ReservoirNetwork) -> float:
    costs = exact_stage_costs(traj.levels, traj.flows, prices.prices, network)
    return float(costs.sum()) + terminal_credit(traj.levels[-1], prices)


def with_objective(traj: Trajectory, prices: PriceSeries, network: ReservoirNetwork) -> Trajectory:
    return Trajectory(traj.levels, traj.flows, exact_objective(traj, prices, network), traj.stage_boundary)


def terminal_water_value(network: ReservoirNetwork, prices) -> np.ndarray:
    """EUR per meter of stored level, valued at the mean price.

    Water in a reservoir is worth the generation energy it yields on its way
    down to the basin through every downstream turbine, at the initial levels.
    """
    p = np.asarray(prices.prices if isinstance(prices, PriceSeries) else prices, dtype=float)
    if p.size == 0:
        raise ModelError("empty price series")
    mean_p = float(p.mean())
    src, dst = network.endpoints()
    l0 = network.initial_levels
    out = np.zeros(network.n_res)
    for i in range(network.n_res):
        energy = 0.0
        node, seen = i, set()
        while node >= 0:
            if node in seen:
                raise ModelError("cycle of generation arcs")
            seen.add(node)
            gen = [k for k, a in enumerate(network.arcs)
                   if src[k] == node and a.direction == Direction.GENERATE]
            if not gen:
                raise ModelError(f"reservoir {network.reservoirs[i].id} has no path to the basin")
            k = gen[0]
            j = dst[k]
            lj = 0.0 if j < 0 else l0[j]
            energy += -network.arcs[k].energy(l0[node], lj)
            node = j
        out[i] = network.reservoirs[i].gamma * energy * mean_p
    return out


def with_water_values(network: ReservoirNetwork, prices: PriceSeries) -> PriceSeries:
    return prices.with_terminal(terminal_water_value(network, prices))


def total_volume(levels, network: ReservoirNetwork) -> np.ndarray:
    """Stored volume per row of a level matrix."""
    return np.atleast_2d(levels) @ network.gammas


def basin_exchange(flows, network: ReservoirNetwork) -> np.ndarray:
    """Cumulative net volume sent to the basin after each step."""
    src, dst = network.endpoints()
    sign = np.where(dst < 0, 1.0, 0.0) - np.where(src < 0, 1.0, 0.0)
    return np.cumsum(np.atleast_2d(flows) @ sign)
