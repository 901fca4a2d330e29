"""Regenerate the frozen simulation fixtures (takes roughly half an hour on
one core).

    python tests/fixtures/make_fixtures.py
"""
import csv
import sys
from pathlib import Path

import numpy as np

from hydroddp import __version__
from hydroddp.io import generate_prices, write_csv
from hydroddp.model import two_reservoir, with_water_values
from hydroddp.sim import Method, SimConfig, run_simulation, sweep

HERE = Path(__file__).parent
SEED, T = 7, 480
T1S = [0, 6, 12, 24, 48]
TCS = [6, 12, 24]


def main(which):
    net = two_reservoir()
    prices = with_water_values(net, generate_prices(SEED, T))
    base = SimConfig(T, 1, 12, Method.SPLIT_DDP, seed=SEED)
    if "sweep" in which:
        rows = []
        for mode, tcs in (("static", TCS), ("tightened", [12])):
            for cell in sweep(base, net, prices, T1S, tcs, [mode]):
                r = cell.result
                print(cell.T1, cell.T_C, mode, r.objective, sum(r.wall_s), flush=True)
                rows.append([mode, cell.T_C, cell.T1, repr(r.objective), sum(r.wall_s), len(r.wall_s),
                             int(sum(r.cuts)), int(cell.knee)])
        write_csv(HERE / "sweep_T480_seed7.csv",
                  ["bound_mode", "T_C", "T1", "realized_objective", "total_wall_s", "resolves",
                   "cuts_total", "knee"], rows, SEED)
    if "pareto" in which:
        rows = []
        for T1 in T1S[1:]:
            split = run_simulation(SimConfig(T, T1, 12, Method.SPLIT_DDP, seed=SEED), net, prices)
            mc = run_simulation(SimConfig(T, T1, 12, Method.MULTICELL, seed=SEED), net, prices)
            print(T1, split.objective, mc.objective, np.mean(mc.budgets), mc.fallbacks, flush=True)
            rows.append([T1, repr(split.objective), float(np.mean(split.wall_s)), repr(mc.objective),
                         float(np.mean(mc.budgets)), float(np.mean(mc.wall_s)), mc.fallbacks,
                         len(mc.wall_s)])
        write_csv(HERE / "pareto_T480_seed7.csv",
                  ["T1_ref", "split_objective", "split_mean_resolve_s", "multicell_objective",
                   "multicell_mean_budget_s", "multicell_mean_resolve_s", "multicell_fallbacks",
                   "resolves"], rows, SEED)


if __name__ == "__main__":
    main(sys.argv[1:] or ["sweep", "pareto"])
