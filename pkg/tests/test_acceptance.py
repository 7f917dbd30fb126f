"""Acceptance criteria 1 to 9.

Each test records one ``criterion k: PASS|FAIL ...`` line, printed inline and
again in the terminal summary.  Tolerances are the contract values.

Training budgets come from the environment so the suite can be run at full
length on a workstation:

* ``DEFUSE_ACCEPT_EPOCHS_1D`` (default 20000, the reference setting)
* ``DEFUSE_ACCEPT_EPOCHS_2D`` (default 1000; the reference 50000 costs about
  an hour per grid on one core)
* ``DEFUSE_ACCEPT_M_2D`` interior samples per side in 2D (default 1000)
"""
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from defuse.fdsolver import dirichlet_data, solve_decoupled
from defuse.geometry import GridSpec
from defuse.gradcheck import run_all
from defuse.harness import convergence_study, order
from defuse.loss import history_csv
from defuse.problems import get_problem, region_map
from defuse.trainer import TrainConfig, train

EPOCHS_1D = int(os.environ.get("DEFUSE_ACCEPT_EPOCHS_1D", "20000"))
EPOCHS_2D = int(os.environ.get("DEFUSE_ACCEPT_EPOCHS_2D", "1000"))
M_2D = int(os.environ.get("DEFUSE_ACCEPT_M_2D", "1000"))

ORDER_WINDOW = (1.6, 2.4)


def config(dim, seed=0):
    if dim == 1:
        return TrainConfig(epochs=EPOCHS_1D, seed=seed)
    return TrainConfig(epochs=EPOCHS_2D, m1=M_2D, m2=M_2D, seed=seed)


def record(k, ok, detail):
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[k] = line
    sys.stdout.write("\n" + line + "\n")
    return ok


def guarded(k):
    """Run a criterion body; an exception is recorded as a failure and re-raised."""
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                record(k, False, f"raised {type(exc).__name__}: {exc}")
                raise
            record(k, ok, detail)
            assert ok, detail
        inner.__name__ = fn.__name__
        return inner
    return wrap


def fmt(xs):
    return "[" + ", ".join("-" if x is None else f"{x:.4g}" for x in xs) + "]"


def within(xs, lo, hi):
    return all(x is not None and lo <= x <= hi for x in xs)


def trained_table_check(name, ratios, grids, bound, key="tau"):
    """Shared body of criteria 1 to 3: finest two Ω orders in the window, final error under ``bound``."""
    ok, parts = True, []
    for tm, tp in ratios:
        p = get_problem(name, tau_minus=tm, tau_plus=tp)
        table = convergence_study(p, grids, config(p.dim))
        orders = table.orders("err_all")
        final = table.rows[-1].err_all
        good = within(orders[-2:], *ORDER_WINDOW) and final <= bound
        ok &= good
        parts.append(f"{tm:g}:{tp:g} orders={fmt(orders[1:])} err(N={grids[-1]})={final:.3g}")
    return ok, f"{name} (bound {bound:g}) " + "; ".join(parts)


@guarded(1)
def test_criterion_1_ex4_1():
    return trained_table_check("ex4_1", [(1e12, 1.0), (1.0, 1e12)], [10, 20, 40, 80, 160], 1.1e-4)


@guarded(2)
def test_criterion_2_ex4_2():
    return trained_table_check("ex4_2", [(1e12, 1.0), (1.0, 1e12)], [10, 20, 40, 80, 160], 1.6e-4)


@guarded(3)
def test_criterion_3_ex4_3():
    ok, detail = trained_table_check("ex4_3", [(1e10, 1.0), (1.0, 1e10)], [10, 20, 40, 80], 1e-3)
    return ok, detail + f" epochs={EPOCHS_2D}"


@guarded(4)
def test_criterion_4_oracle_orders():
    ok, parts = True, []
    for name in ("ex4_3", "ex4_5"):
        table = convergence_study(get_problem(name), [20, 40, 80, 160], oracle=True)
        orders = table.orders("err_all")[1:]
        good = within(orders, 1.9, 2.1)
        ok &= good
        parts.append(f"{name} orders={fmt(orders)} errs={fmt([r.err_all for r in table.rows])}")
    return ok, "; ".join(parts)


@guarded(5)
def test_criterion_5_gradient_oracles():
    results = run_all(seed=0, instances=100)
    return all(r.passed for r in results), "; ".join(r.line() for r in results)


class _Stub:
    def __init__(self, beta, f):
        self._beta, self._f = beta, f

    def beta(self, side, x):
        return self._beta(x), np.zeros_like(x)

    def f(self, side, x, u):
        return self._f(x, u)


def _interior_solve(stub, n, boundary, tol=1e-10):
    from defuse.fdsolver import solve_picard

    grid = GridSpec.uniform(((0.0, 1.0), (0.0, 1.0)), n)
    inner = ~grid.boundary_mask()
    data = np.full(grid.shape, np.nan)
    data[~inner] = boundary(grid.nodes()[~inner])
    return grid, inner, data, solve_picard(stub, "plus", grid, None, data, tol=tol, unknown_mask=inner)


@guarded(6)
def test_criterion_6_fd_properties():
    from defuse.fdsolver import apply_stencil

    # quadratic exactness with constant beta on random quadratics; the unit
    # square at h = 1/8 keeps the roundoff floor eps |u| beta / h^2 well
    # below the 1e-12 target, so what remains is truncation
    rng = np.random.default_rng(6)
    grid = GridSpec.uniform(((0.0, 1.0), (0.0, 1.0)), 8)
    x = grid.nodes()
    flat = np.flatnonzero((~grid.boundary_mask()).ravel())
    worst = 0.0
    for _ in range(20):
        c = rng.uniform(-1, 1, 6)
        b0 = rng.uniform(0.5, 2.0)
        u = c[0] + c[1] * x[..., 0] + c[2] * x[..., 1] + c[3] * x[..., 0] ** 2 + c[4] * x[..., 0] * x[..., 1] \
            + c[5] * x[..., 1] ** 2
        stub = _Stub(lambda q: np.full(len(q), b0), None)
        got = apply_stencil(stub, "plus", grid, u, flat)
        worst = max(worst, float(np.max(np.abs(got + 2 * b0 * (c[3] + c[5])))))
    quad_ok = worst <= 1e-12

    # discrete maximum principle
    violations = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        a, k = r.uniform(0.1, 3.0, 3), r.uniform(0, 6, 2)
        stub = _Stub(lambda q: a[0] + a[1] * np.sin(k[0] * q[:, 0]) ** 2 + a[2] * np.cos(k[1] * q[:, 1]) ** 2,
                     lambda q, u: -r.random(len(q)))
        grid_, inner, data, gf = _interior_solve(stub, 16, lambda q: r.normal(size=len(q)), tol=np.inf)
        violations += int(np.max(gf.values[inner]) > np.nanmax(data) + 1e-12)

    # manufactured order without an interface
    exact = lambda q: np.sin(np.pi * q[:, 0]) * np.cos(2 * q[:, 1]) + q[:, 1]  # noqa: E731
    beta = lambda q: 1 + q[:, 0] ** 2 + 0.5 * q[:, 1] ** 2  # noqa: E731

    def source(q, u):
        s, c = np.sin(np.pi * q[:, 0]), np.cos(2 * q[:, 1])
        ux, uy = np.pi * np.cos(np.pi * q[:, 0]) * c, -2 * s * np.sin(2 * q[:, 1]) + 1
        return -(beta(q) * (-(np.pi**2) - 4) * s * c + 2 * q[:, 0] * ux + q[:, 1] * uy)

    errs = []
    for n in (20, 40, 80):
        g, inner, _, gf = _interior_solve(_Stub(beta, source), n, exact)
        e = gf.values[inner] - exact(g.nodes()[inner])
        errs.append(np.sqrt(g.cell_volume * np.sum(e**2)))
    orders = [order(a, b) for a, b in zip(errs, errs[1:])]
    order_ok = within(orders, 1.95, 2.05)
    ok = quad_ok and violations == 0 and order_ok
    return ok, (f"quadratic max|err|={worst:.2e}; max-principle violations={violations}/50; "
                f"manufactured orders={fmt(orders)}")


@guarded(7)
def test_criterion_7_ex4_7_sharp_edge():
    p = get_problem("ex4_7")
    grids = [20, 40, 80, 160, 320]
    table = convergence_study(p, grids, config(2))
    l2 = table.orders("err_all")
    linf = table.orders("linf_all")
    ok = within(l2[1:], *ORDER_WINDOW) and linf[-1] is not None and linf[-1] >= 1.5
    return ok, f"L2 orders={fmt(l2[1:])} Linf orders={fmt(linf[1:])} epochs={EPOCHS_2D}"


@guarded(8)
def test_criterion_8_ex4_11_residual():
    p = get_problem("ex4_11")
    table = convergence_study(p, [20, 40, 80, 160, 320], config(2))
    orders = table.orders("err_all")
    ok = within(orders[-2:], 1.2, 1.8)
    return ok, f"residual orders={fmt(orders[1:])} residuals={fmt([r.err_all for r in table.rows])} epochs={EPOCHS_2D}"


def _solve_outputs(problem, n, cfg):
    grid = GridSpec.uniform(problem.bounds, n)
    rmap = region_map(problem, grid)
    trained = train(problem, rmap, cfg)
    sol = solve_decoupled(trained, problem, grid, rmap, concurrent=False)
    return trained, grid, rmap, sol, (history_csv(trained.loss_history), sol.minus.to_csv(), sol.plus.to_csv())


@guarded(9)
def test_criterion_9_determinism_and_decoupling():
    notes, ok = [], True
    for name, n, cfg in (("ex4_2", 40, TrainConfig(epochs=200, seed=9)),
                         ("ex4_3", 20, TrainConfig(epochs=20, m1=200, m2=200, seed=9))):
        p = get_problem(name)
        trained, grid, rmap, sol, first = _solve_outputs(p, n, cfg)
        second = _solve_outputs(p, n, cfg)[4]
        same_runs = first == second

        bumped = dirichlet_data(p, "plus", rmap, trained) + 1e-3
        moved = solve_decoupled(trained, p, grid, rmap, concurrent=False, dirichlet_override={"plus": bumped})
        minus_fixed = moved.minus.values.tobytes() == sol.minus.values.tobytes()

        par = solve_decoupled(trained, p, grid, rmap, concurrent=True)
        same_par = (par.minus.values.tobytes() == sol.minus.values.tobytes()
                    and par.plus.values.tobytes() == sol.plus.values.tobytes())
        ok &= same_runs and minus_fixed and same_par
        notes.append(f"{name}: reruns identical={same_runs} minus invariant={minus_fixed} "
                     f"concurrent identical={same_par}")
    return ok, "; ".join(notes)
