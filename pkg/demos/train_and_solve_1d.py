"""Train the band network for a 1D degenerate problem, then solve both sides.

Uses Adam rather than the 1D default (plain SGD): at a 1e12 coefficient
ratio plain SGD with a fixed step can blow up depending on the seed.

    python3 demos/train_and_solve_1d.py [epochs]
"""
import sys

import numpy as np

from defuse.fdsolver import solve_decoupled
from defuse.geometry import GridSpec
from defuse.harness import region_errors
from defuse.problems import get_problem, region_map
from defuse.trainer import TrainConfig, train

if __name__ == "__main__":
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    problem = get_problem("ex4_1", tau_minus=1e12, tau_plus=1.0)
    grid = GridSpec.uniform(problem.bounds, 80)
    rmap = region_map(problem, grid)

    def report(step, b):
        if step % max(1, epochs // 10) == 0:
            print(f"step {step:6d}  l1={b.l1:.3e} l2={b.l2:.3e} l4={b.l4:.3e} total={b.total:.3e}")

    trained = train(problem, rmap, TrainConfig(epochs=epochs, optimizer="adam", seed=0), callback=report)
    sol = solve_decoupled(trained, problem, grid, rmap)
    u = sol.composite()
    e1, e2, e_all, linf = region_errors(u, problem, rmap, "l2")
    print(f"L2 error: omega1={e1:.3e} omega2={e2:.3e} omega={e_all:.3e} max={linf:.3e}")
    x = grid.axis(0)
    for xi, ui in list(zip(x, u))[::10]:
        print(f"x={xi:5.3f} u_h={ui: .6f}")
    print("finite everywhere:", bool(np.all(np.isfinite(u))))
