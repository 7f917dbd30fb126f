"""Flux-form finite differences on the two regular subdomains.

Each side is an independent Dirichlet problem: unknowns are the ``omega1``
(minus) or ``omega2`` (plus) nodes, and every stencil neighbour outside that
set must carry a Dirichlet value (network values on the Gamma frontier, ``g``
on the outer boundary).  Coefficients are evaluated analytically at
half-points, so a degenerate beta never enters as long as the band separates
the interface from the unknowns.
"""
from __future__ import annotations

import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import MissingDirichlet, PicardDiverged, SolverBreakdown
from .geometry import GridSpec, Label, RegionMap

UNKNOWN_LABEL = {"minus": Label.OMEGA1, "plus": Label.OMEGA2}
FRONTIER_LABEL = {"minus": Label.GAMMA_MINUS, "plus": Label.GAMMA_PLUS}
BAND_LABEL = {"minus": Label.BAND_MINUS, "plus": Label.BAND_PLUS}


def thread_budget() -> int:
    """Worker cap from ``DEFUSE_THREADS`` (0 or unset means automatic)."""
    raw = os.environ.get("DEFUSE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class GridFunction:
    """Nodal values on ``mask``; entries outside the mask are NaN."""

    grid: GridSpec
    values: np.ndarray
    mask: np.ndarray
    iterations: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.grid.shape or self.mask.shape != self.grid.shape:
            raise ValueError("values and mask must match the grid shape")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("grid function has non-finite values on its region")

    def to_csv(self) -> str:
        buf = io.StringIO()
        coords = self.grid.nodes()[self.mask]
        vals = self.values[self.mask]
        header = "x,u" if self.grid.dim == 1 else ",".join(f"x{k + 1}" for k in range(self.grid.dim)) + ",u"
        buf.write(header + "\n")
        for c, v in zip(coords, vals):
            buf.write(",".join(f"{t:.17g}" for t in (*c, v)) + "\n")
        return buf.getvalue()


@dataclass
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    unknowns: np.ndarray  # flat node indices, row-major
    index: np.ndarray  # flat node index -> row, -1 if not an unknown
    side: str = "plus"
    known_flux: np.ndarray = field(default=None, repr=False)


def half_point_beta(problem, side: str, grid: GridSpec, flat_nodes: np.ndarray):
    """beta at ``x - h/2 e_k`` and ``x + h/2 e_k`` for each node and axis.

    Returns an array of shape ``(len(flat_nodes), dim, 2)``.
    """
    x = grid.nodes().reshape(-1, grid.dim)[flat_nodes]
    out = np.empty((len(flat_nodes), grid.dim, 2))
    for k in range(grid.dim):
        for j, sgn in enumerate((-0.5, 0.5)):
            xs = x.copy()
            xs[:, k] += sgn * grid.h[k]
            out[:, k, j] = problem.beta(side, xs)[0]
    return out


def _neighbors(grid: GridSpec, flat: np.ndarray):
    """Flat neighbour indices, shape ``(n, dim, 2)``; -1 off the grid."""
    multi = np.array(np.unravel_index(flat, grid.shape)).T
    out = np.full((len(flat), grid.dim, 2), -1, dtype=np.int64)
    for k in range(grid.dim):
        for j, step in enumerate((-1, 1)):
            m = multi.copy()
            m[:, k] += step
            ok = (m[:, k] >= 0) & (m[:, k] < grid.shape[k])
            if ok.any():
                out[ok, k, j] = np.ravel_multi_index(tuple(m[ok].T), grid.shape)
    return out


def assemble(problem, side: str, grid: GridSpec, rmap: RegionMap, dirichlet, u_prev=None,
             unknown_mask=None) -> LinearSystem:
    """Assemble ``-div(beta grad u) = f(x, u_prev)`` on one regular subdomain.

    ``dirichlet`` is a nodal array (NaN where not prescribed).  ``u_prev`` is
    a nodal array used only by the source term; ``None`` means zero.
    """
    dirichlet = np.asarray(dirichlet, dtype=float).ravel()
    if unknown_mask is None:
        unknown_mask = rmap.mask(UNKNOWN_LABEL[side])
    unknowns = np.flatnonzero(np.asarray(unknown_mask).ravel())
    size = int(np.prod(grid.shape))
    index = np.full(size, -1, dtype=np.int64)
    index[unknowns] = np.arange(len(unknowns))

    nb = _neighbors(grid, unknowns)
    beta = half_point_beta(problem, side, grid, unknowns)
    if not np.all(np.isfinite(beta)) or np.any(beta <= 0):
        bad = np.argwhere(~(beta > 0))[0]
        node = np.unravel_index(unknowns[bad[0]], grid.shape)
        raise SolverBreakdown(f"beta is not positive at a half-point next to node {tuple(int(i) for i in node)} ({side} side)")
    inv_h2 = np.array([1.0 / hk**2 for hk in grid.h])
    coef = beta * inv_h2[None, :, None]

    rows, cols, vals = [np.arange(len(unknowns))], [np.arange(len(unknowns))], [coef.sum(axis=(1, 2))]
    known = np.zeros(len(unknowns))
    for k in range(grid.dim):
        for j in range(2):
            q = nb[:, k, j]
            c = coef[:, k, j]
            if np.any(q < 0):
                i = int(np.flatnonzero(q < 0)[0])
                raise MissingDirichlet(f"node {np.unravel_index(unknowns[i], grid.shape)} lies on the grid edge without Dirichlet data")
            inner = index[q] >= 0
            rows.append(np.flatnonzero(inner))
            cols.append(index[q[inner]])
            vals.append(-c[inner])
            outer = ~inner
            dv = dirichlet[q[outer]]
            if not np.all(np.isfinite(dv)):
                bad = q[outer][~np.isfinite(dv)][0]
                raise MissingDirichlet(f"no Dirichlet value at node {tuple(int(i) for i in np.unravel_index(bad, grid.shape))} ({side} side)")
            known[outer] += c[outer] * dv
    n = len(unknowns)
    matrix = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))

    x = grid.nodes().reshape(-1, grid.dim)[unknowns]
    up = np.zeros(n) if u_prev is None else np.asarray(u_prev, float).ravel()[unknowns]
    rhs = np.asarray(problem.f(side, x, up), dtype=float) + known
    return LinearSystem(matrix, rhs, unknowns, index, side, known)


def residual_tolerance(matrix, x, rhs) -> float:
    """Residual target: ``1e-12 (1 + |b|)`` or a few ulps of ``|A||x| + |b|``."""
    scale = abs(matrix) @ np.abs(x) + np.abs(rhs)
    floor = 64 * np.finfo(float).eps * float(np.max(scale, initial=0.0))
    return max(1e-12 * (1.0 + float(np.max(np.abs(rhs), initial=0.0))), floor)


class _Factor:
    """Sparse LU with residual-checked iterative refinement."""

    def __init__(self, matrix):
        self.matrix = sp.csc_matrix(matrix)
        try:
            self.lu = splu(self.matrix) if self.matrix.shape[0] else None
        except RuntimeError as exc:  # singular factor
            raise SolverBreakdown(f"sparse LU failed: {exc}") from exc

    def solve(self, rhs, refine: int = 3):
        rhs = np.asarray(rhs, dtype=float)
        if self.lu is None:
            return rhs.copy()
        x = self.lu.solve(rhs)
        for _ in range(refine + 1):
            r = rhs - self.matrix @ x
            if not np.all(np.isfinite(x)):
                break
            if np.max(np.abs(r), initial=0.0) <= residual_tolerance(self.matrix, x, rhs):
                return x
            x = x + self.lu.solve(r)
        raise SolverBreakdown("linear solve did not reach the residual target")


def solve_linear(system: LinearSystem) -> np.ndarray:
    return _Factor(system.matrix).solve(system.rhs)


def solve_picard(problem, side: str, grid: GridSpec, rmap: RegionMap, dirichlet,
                 tol: float = 1e-10, max_iter: int = 500, unknown_mask=None) -> GridFunction:
    """Frozen-source fixed point: ``A u_m = f(x, u_{m-1}) + boundary terms``.

    The matrix does not depend on ``u`` so it is factored once.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    dirichlet = np.asarray(dirichlet, dtype=float)
    u = np.where(np.isfinite(dirichlet), dirichlet, 0.0)
    system = assemble(problem, side, grid, rmap, dirichlet, u, unknown_mask)
    factor = _Factor(system.matrix)
    x = grid.nodes().reshape(-1, grid.dim)[system.unknowns]
    flat = u.ravel()
    current = np.zeros(len(system.unknowns))
    last_inc, growth, iters = np.inf, 0, 0
    for iters in range(1, max_iter + 1):
        if iters > 1:
            flat[system.unknowns] = current
            rhs = np.asarray(problem.f(side, x, current), dtype=float) + system.known_flux
        else:
            rhs = system.rhs
        new = factor.solve(rhs)
        inc = float(np.max(np.abs(new - current), initial=0.0))
        current = new
        if inc < tol:
            break
        growth = growth + 1 if inc > last_inc else 0
        if growth >= 10:
            raise PicardDiverged(f"Picard increment grew for 10 consecutive iterations ({side} side, last {inc:.3e})")
        last_inc = inc
    flat[system.unknowns] = current
    known = np.isfinite(dirichlet.ravel())
    mask = np.zeros(flat.shape, dtype=bool)
    mask[system.unknowns] = True
    # the region's Dirichlet frontier belongs to the grid function: every
    # prescribed interior node, plus the outer-boundary nodes the stencil uses
    mask |= known & ~grid.boundary_mask().ravel()
    nb = _neighbors(grid, system.unknowns).ravel()
    nb = nb[nb >= 0]
    mask[nb[known[nb]]] = True
    values = np.where(mask, flat, np.nan).reshape(grid.shape)
    return GridFunction(grid, values, mask.reshape(grid.shape), iters)


class ExactOracle:
    """Stands in for a trained network by returning exact branch values."""

    def __init__(self, problem):
        self.problem = problem

    def evaluate(self, side: str, points) -> np.ndarray:
        return self.problem.exact(side, np.atleast_2d(points)).value


def boundary_values(problem, side: str, points) -> np.ndarray:
    """Outer-boundary data seen by one side's solve."""
    if problem.has_exact:
        return problem.exact(side, points).value
    return problem.g(points)


@dataclass
class DecoupledSolution:
    minus: GridFunction
    plus: GridFunction
    band: np.ndarray  # network values on band nodes, g on the outer boundary, NaN elsewhere
    rmap: RegionMap

    def composite(self) -> np.ndarray:
        """Whole-grid ``u_h``: FD values off the band, network values on it."""
        u = np.array(self.band, copy=True)
        for gf in (self.minus, self.plus):
            u[gf.mask] = gf.values[gf.mask]
        return u


def dirichlet_data(problem, side: str, rmap: RegionMap, source) -> np.ndarray:
    grid = rmap.grid
    nodes = grid.nodes()
    data = np.full(grid.shape, np.nan)
    bmask = rmap.mask(Label.OUTER_BOUNDARY)
    if bmask.any():
        data[bmask] = boundary_values(problem, side, nodes[bmask])
    fmask = rmap.mask(FRONTIER_LABEL[side])
    if fmask.any():
        data[fmask] = source.evaluate(side, nodes[fmask])
    return data


def solve_decoupled(source, problem, grid: GridSpec, rmap: RegionMap, *, concurrent: Optional[bool] = None,
                    tol: float = 1e-10, max_iter: int = 500, dirichlet_override=None) -> DecoupledSolution:
    """Solve both regular subproblems with Dirichlet data from ``source``.

    ``source`` is anything with ``evaluate(side, points)``: a trained network
    or :class:`ExactOracle`.  ``dirichlet_override`` maps a side to a nodal
    Dirichlet array and replaces the data computed from ``source``.
    """
    override = dirichlet_override or {}
    data = {s: override.get(s, None) for s in ("minus", "plus")}
    for s in data:
        if data[s] is None:
            data[s] = dirichlet_data(problem, s, rmap, source)

    def run(side):
        return solve_picard(problem, side, grid, rmap, data[side], tol=tol, max_iter=max_iter)

    if concurrent is None:
        concurrent = thread_budget() > 1
    if concurrent:
        with ThreadPoolExecutor(max_workers=2) as pool:
            fm, fp = pool.submit(run, "minus"), pool.submit(run, "plus")
            minus, plus = fm.result(), fp.result()
    else:
        minus, plus = run("minus"), run("plus")

    band = np.full(grid.shape, np.nan)
    nodes = grid.nodes()
    for side in ("minus", "plus"):
        m = rmap.mask(BAND_LABEL[side])
        if m.any():
            band[m] = source.evaluate(side, nodes[m])
    # outer-boundary nodes next to the band belong to neither solve; give them
    # their Dirichlet data so the composite covers the whole grid
    outer = rmap.mask(Label.OUTER_BOUNDARY)
    for side, m in (("minus", outer & (rmap.phi_nodes < 0)), ("plus", outer & (rmap.phi_nodes >= 0))):
        if m.any():
            band[m] = boundary_values(problem, side, nodes[m])
    return DecoupledSolution(minus, plus, band, rmap)


def apply_stencil(problem, side: str, grid: GridSpec, u, flat_nodes) -> np.ndarray:
    """Discrete ``-div(beta grad u)`` at the given nodes (all neighbours must exist)."""
    flat_nodes = np.asarray(flat_nodes, dtype=np.int64)
    u = np.asarray(u, dtype=float).ravel()
    nb = _neighbors(grid, flat_nodes)
    beta = half_point_beta(problem, side, grid, flat_nodes)
    out = np.zeros(len(flat_nodes))
    uc = u[flat_nodes]
    for k in range(grid.dim):
        hk2 = grid.h[k] ** 2
        out += (beta[:, k, 0] * (uc - u[nb[:, k, 0]]) + beta[:, k, 1] * (uc - u[nb[:, k, 1]])) / hk2
    return out
