import io
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hydroddp.ddp import (Cut, CutSet, bounds_report, build_second_stage_lp, convergence_tol,
                          extract_cut, run_algorithm1, solve_second_stage)
from hydroddp.dp import Grid, extract_policy_trajectory, linear_terminal, solve_dp
from hydroddp.linearize import delta_schedule, tightened_level_bounds
from hydroddp.model import PriceSeries, exact_stage_costs, simulate, with_water_values

from conftest import single_arc_network, small_network, synthetic


def tiny(seed=0, T=6):
    net = small_network()
    return net, with_water_values(net, synthetic(seed, T))


# -- cut sets -------------------------------------------------------------------------
def test_empty_cutset_is_zero():
    cs = CutSet()
    assert cs.evaluate([1.0, 2.0]) == 0.0 and isinstance(cs.evaluate([1.0, 2.0]), float)
    assert np.array_equal(cs.evaluate(np.ones((3, 2))), np.zeros(3))


def test_cutset_max_and_dedupe():
    cs = CutSet([Cut(np.array([1.0, 0.0]), 0.0), Cut(np.array([0.0, 1.0]), -1.0)])
    assert cs.evaluate([2.0, 5.0]) == 4.0
    assert not cs.add(Cut(np.array([1.0, 0.0]), 1e-10))
    assert len(cs) == 2
    assert cs.add(Cut(np.array([1.0, 0.0]), 1e-6))
    with pytest.raises(ValueError):
        cs.add(Cut(np.array([np.nan, 0.0]), 0.0))
    c = Cut(np.array([2.0, -1.0]), 3.0)
    assert c([1.0, 1.0])[0] == 4.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-100, 100)), min_size=1,
                max_size=8), st.randoms(use_true_random=False))
def test_cutset_order_independent(rows, rnd):
    cuts = [Cut(np.array([a, b]), c) for a, b, c in rows]
    X = np.random.default_rng(0).uniform(-5, 5, (20, 2))
    shuffled = cuts[:]
    rnd.shuffle(shuffled)
    assert np.array_equal(CutSet(cuts).evaluate(X), CutSet(shuffled).evaluate(X))


# -- second stage ------------------------------------------------------------------------
def test_build_errors(net, prices48):
    with pytest.raises(ValueError):
        build_second_stage_lp(net, prices48, 48, 48)
    with pytest.raises(ValueError):
        build_second_stage_lp(net, prices48, -1, 48)
    with pytest.raises(ValueError):
        build_second_stage_lp(net, prices48, 12, 60)


def test_hand_count_one_arc():
    net = single_arc_network()
    st_ = build_second_stage_lp(net, PriceSeries([0.05, 0.05]), 1, 2)
    lp = st_.lp
    assert lp.n == 2 * 2 + 1 + 2
    assert lp.A_eq.shape[0] == 2 + 2  # dynamics + coupling
    assert lp.A_in.shape[0] == 8
    assert len(st_.coupling_rows) == 2


def test_tightened_same_structure(net, prices48):
    a = build_second_stage_lp(net, prices48, 12, 48).lp
    b = build_second_stage_lp(net, prices48, 12, 48, tightened=True).lp
    assert a.A_eq.shape == b.A_eq.shape and a.A_in.shape == b.A_in.shape
    assert (a.A_eq != b.A_eq).nnz == 0 and np.array_equal(a.c, b.c)
    # envelope rows carry the box corners in their coefficients and RHS
    for tags in ("var_tags", "row_tags"):
        ta, tb = getattr(a, tags), getattr(b, tags)
        assert ta.keys() == tb.keys() and all(np.array_equal(ta[k], tb[k]) for k in ta)
    assert not np.array_equal(a.b_in, b.b_in)


def test_zero_prices_terminal_only():
    net = small_network()
    ps = PriceSeries(np.zeros(4), [0.7, 0.2])
    stage = build_second_stage_lp(net, ps, 2, 4)
    sol = solve_second_stage(stage, [3.0, 4.0])
    assert sol.objective == pytest.approx(-ps.terminal_values @ sol.levels[-1], abs=1e-9)
    # one hour moves at most 4 m, total volume is conserved unless water leaves
    # for the basin, so the optimum fills the more valuable reservoir
    assert sol.levels[-1][0] == pytest.approx(10.0, abs=1e-7)


def test_second_stage_rejects_out_of_bounds(net, prices48):
    stage = build_second_stage_lp(net, prices48, 12, 48)
    with pytest.raises(ValueError):
        solve_second_stage(stage, [-1.0, 50.0])


def test_convexity_and_determinism():
    net, ps = tiny(1)
    stage = build_second_stage_lp(net, ps, 2, 6)
    rng = np.random.default_rng(3)
    G = lambda x: solve_second_stage(stage, x).objective
    for _ in range(20):
        x, y = rng.uniform(0, 10, 2), rng.uniform(0, 10, 2)
        th = rng.uniform()
        assert G(th * x + (1 - th) * y) <= th * G(x) + (1 - th) * G(y) + 1e-7
    x = np.array([4.2, 6.1])
    assert G(x) == G(x)


@pytest.mark.parametrize("tightened", [False, True])
def test_cuts_tight_and_valid(tightened):
    net, ps = tiny(2)
    T1, T = 2, 6
    stage = build_second_stage_lp(net, ps, T1, T, tightened=tightened)
    lo, hi = (tightened_level_bounds(net, T1) if tightened else (net.level_min, net.level_max))
    rng = np.random.default_rng(11)
    origins = rng.uniform(lo, hi, (5, 2))
    others = rng.uniform(lo, hi, (100, 2))
    values = np.array([solve_second_stage(stage, x).objective for x in others])
    cs = CutSet()
    for k, x in enumerate(origins):
        sol = solve_second_stage(stage, x)
        cut = extract_cut(sol, stage, k)
        assert cut(x)[0] == pytest.approx(sol.objective, abs=1e-7)
        assert np.all(cut(others) <= values + 1e-6)
        cs.add(cut)
        # same state, same dual vertex
        assert not cs.add(extract_cut(solve_second_stage(stage, x), stage, k))


def test_cut_needs_optimal_solution():
    net, ps = tiny(0)
    stage = build_second_stage_lp(net, ps, 2, 6)
    sol = solve_second_stage(stage, [5.0, 5.0])
    sol.solution = None
    with pytest.raises(ValueError):
        extract_cut(sol, stage)


# -- the loop ------------------------------------------------------------------------------
def test_flat_second_stage_converges_fast():
    net = small_network()
    p = np.concatenate([synthetic(4, 5).prices, [0.0]])
    ps = PriceSeries(p, [0.0, 0.0])
    res = run_algorithm1(net, ps, 5, 6, Grid(9, 9))
    assert res.converged and res.iterations <= 2
    table, _ = solve_dp(net, PriceSeries(p[:5]), 0, 5, linear_terminal([]), Grid(9, 9))
    roll = extract_policy_trajectory(table, net.initial_levels, net, PriceSeries(p[:5]))
    assert res.trajectory.objective == pytest.approx(roll.trajectory.objective, abs=1e-9)


def test_preset_48h(net, prices48):
    buf = io.StringIO()
    res = run_algorithm1(net, prices48, 12, 48, log_stream=buf)
    assert res.converged and len(res.cuts) <= 10
    assert res.ub_history[-1] - res.lb_history[-1] <= convergence_tol(res.ub_history[-1])
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(recs) == res.iterations
    assert set(recs[0]) == {"iter", "x_T1", "UB", "LB", "cut_count", "wall_ms"}
    assert recs[0]["LB"] is None
    # the first master solve has no terminal model; from the first cut on the
    # master value only rises
    assert np.all(np.diff(res.master_history[1:]) >= -1e-9)
    assert np.all(np.diff(res.lb_history) >= 0)
    again = run_algorithm1(net, prices48, 12, 48)
    assert again.iterations == res.iterations and again.ub_history == res.ub_history


def test_non_convergence_is_reported():
    net, ps = tiny(0)
    res = run_algorithm1(net, ps, 2, 6, Grid(9, 9), max_iter=1)
    assert not res.converged and res.iterations == 1
    assert len(res.ub_history) == 1 and math.isinf(res.lb_history[0])


def test_first_stage_required(net, prices48):
    with pytest.raises(ValueError):
        run_algorithm1(net, prices48, 0, 48)


def test_tail_is_exactly_feasible(net, prices48):
    res = run_algorithm1(net, prices48, 12, 48, tightened=True)
    tr = res.trajectory
    replay = simulate(tr.levels[0], tr.flows, net)
    assert np.allclose(replay, tr.levels, atol=1e-6)
    assert np.all(tr.levels >= net.level_min - 1e-9) and np.all(tr.levels <= net.level_max + 1e-9)
    lo = np.array([a.flow_min for a in net.arcs])
    hi = np.array([a.flow_max for a in net.arcs])
    assert np.all(tr.flows >= lo - 1e-9) and np.all(tr.flows <= hi + 1e-9)


@pytest.mark.parametrize("seed", [0, 1])
def test_matches_two_stage_enumeration(seed):
    # 500 m3 moves these reservoirs by 5 m, four 1.25 m grid spacings, so
    # first-stage states stay on the grid and the DP is an exact tree search
    net = small_network(vmax=500.0)
    ps = with_water_values(net, synthetic(seed, 6))
    grid = Grid(9, 3)
    res = run_algorithm1(net, ps, 2, 6, grid)
    assert res.converged
    stage = build_second_stage_lp(net, ps, 2, 6)
    combos = grid.flow_combos(net)
    best = math.inf
    for seq in itertools.product(range(len(combos)), repeat=2):
        flows = combos[list(seq)]
        levels = simulate(net.initial_levels, flows, net)
        if np.any(levels < net.level_min - 1e-9) or np.any(levels > net.level_max + 1e-9):
            continue
        head = exact_stage_costs(levels, flows, ps.prices[:2], net).sum()
        best = min(best, head + solve_second_stage(stage, levels[-1]).objective)
    tr = res.trajectory
    head = exact_stage_costs(tr.levels[:3], tr.flows[:2], ps.prices[:2], net).sum()
    assert head + res.ub_history[-1] == pytest.approx(best, abs=1e-6)


def test_bounds_report():
    net, ps = tiny(0)
    res = run_algorithm1(net, ps, 2, 6, Grid(9, 9), tightened=True)
    rep = bounds_report(res, net, ps)
    assert rep.g0_lower == res.master_history[-1]
    assert rep.sum_delta == pytest.approx(delta_schedule(net, ps, 2, 6, True, net.initial_levels).sum())
    assert rep.interval[1] - rep.interval[0] == pytest.approx(rep.eps_surrogate + rep.sum_delta)
    static = delta_schedule(net, ps, 2, 6, False).sum()
    assert rep.sum_delta <= static
    assert rep.oracle_in_interval is None
    d = rep.as_dict()
    assert "eps_surrogate" in d and d["realized_objective"] == res.trajectory.objective


def test_bounds_report_pure_dp():
    net, ps = tiny(0, 3)
    res = run_algorithm1(net, ps, 3, 3, Grid(9, 9))
    rep = bounds_report(res, net, ps, oracle_value=res.g0_lower)
    assert rep.sum_delta == 0.0
    assert rep.interval[1] - rep.interval[0] == pytest.approx(rep.eps_surrogate)
    assert rep.oracle_in_interval
