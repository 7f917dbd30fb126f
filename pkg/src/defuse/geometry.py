"""Level sets, uniform grids, node classification and interface node pairing.

Points are always arrays with a trailing coordinate axis, so a batch of 1D
points has shape ``(n, 1)`` and a batch of 2D points ``(n, 2)``.  Grid node
arrays are indexed ``[i]`` in 1D and ``[i, j]`` in 2D with ``i`` running
along the first coordinate.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import (
    BandCoversDomain,
    DegenerateNormal,
    InterfaceTouchesBoundary,
    ProjectionFailed,
)

ON_INTERFACE_TOL = 1e-12
NORMAL_TOL = 1e-8


@dataclass(frozen=True)
class LevelSet:
    """Scalar field whose zero set is the interface.

    ``phi`` maps ``(..., d)`` points to ``(...)`` values and ``grad`` maps
    them to ``(..., d)``.  Negative values belong to the minus side.
    """

    dim: int
    phi: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    name: str = "levelset"

    def __call__(self, x):
        return self.phi(np.asarray(x, dtype=float))


def interface_point(alpha: float) -> LevelSet:
    """1D level set ``x - alpha``."""
    alpha = float(alpha)

    def phi(x):
        return x[..., 0] - alpha

    def grad(x):
        return np.ones_like(x)

    return LevelSet(1, phi, grad, name=f"point({alpha:g})")


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid; ``counts`` are node counts per axis."""

    bounds: tuple
    counts: tuple

    def __post_init__(self):
        if len(self.bounds) != len(self.counts):
            raise ValueError("bounds and counts disagree in dimension")
        for (lo, hi), n in zip(self.bounds, self.counts):
            if not hi > lo or n < 2:
                raise ValueError("grid needs hi > lo and at least two nodes per axis")

    @classmethod
    def uniform(cls, bounds, n_intervals: int) -> "GridSpec":
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        return cls(bounds, tuple(int(n_intervals) + 1 for _ in bounds))

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return tuple(self.counts)

    @property
    def h(self) -> tuple:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.counts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def axis(self, k: int) -> np.ndarray:
        lo = self.bounds[k][0]
        return lo + np.arange(self.counts[k]) * self.h[k]

    def nodes(self) -> np.ndarray:
        """Node coordinates with shape ``(*shape, dim)``."""
        axes = np.meshgrid(*[self.axis(k) for k in range(self.dim)], indexing="ij")
        return np.stack(axes, axis=-1)

    def node(self, index) -> np.ndarray:
        index = np.atleast_1d(index)
        return np.array([self.bounds[k][0] + index[k] * self.h[k] for k in range(self.dim)])

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[k] = 0
            mask[tuple(sl)] = True
            sl[k] = -1
            mask[tuple(sl)] = True
        return mask


class Label(enum.IntEnum):
    OMEGA1 = 0
    OMEGA2 = 1
    BAND_MINUS = 2
    BAND_PLUS = 3
    GAMMA_MINUS = 4
    GAMMA_PLUS = 5
    OUTER_BOUNDARY = 6

    @property
    def text(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class NodePair:
    """Two grid nodes straddling the interface, used by the jump losses.

    ``case`` is ``"offset"`` when the interface crosses the grid edge between
    the two nodes and ``"through_node"`` when it passes through the node
    ``center`` that sits between them.
    """

    minus: tuple
    plus: tuple
    case: str
    foot: tuple
    center: Optional[tuple] = None


@dataclass
class RegionMap:
    grid: GridSpec
    labels: np.ndarray
    band_cells: np.ndarray
    band_width_cells: int
    node_pairs: list = field(default_factory=list)
    phi_nodes: Optional[np.ndarray] = None

    def mask(self, *labels) -> np.ndarray:
        return np.isin(self.labels, [int(lab) for lab in labels])

    def count(self, label) -> int:
        return int(np.count_nonzero(self.labels == int(label)))

    def indices(self, *labels) -> np.ndarray:
        """Multi-indices (row-major order) of nodes carrying any of ``labels``."""
        return np.argwhere(self.mask(*labels))

    def label_of(self, index) -> Label:
        return Label(int(self.labels[tuple(np.atleast_1d(index))]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["i", "j", "label"])
        for idx in np.ndindex(*self.labels.shape):
            i = idx[0]
            j = idx[1] if len(idx) > 1 else 0
            writer.writerow([i, j, Label(int(self.labels[idx])).text])
        return buf.getvalue()


def _snap(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=float)
    values[np.abs(values) < ON_INTERFACE_TOL] = 0.0
    return values


def cut_cells(phi: LevelSet, grid: GridSpec, subsamples: int = 4) -> np.ndarray:
    """Boolean array over cells whose closure meets the interface.

    Each cell is probed on a ``(subsamples+1)^d`` lattice including its
    corners; the cell is cut when the probed values reach both signs or zero.
    """
    s = int(subsamples)
    axes = []
    for k in range(grid.dim):
        lo = grid.bounds[k][0]
        m = s * (grid.counts[k] - 1) + 1
        axes.append(lo + np.arange(m) * (grid.h[k] / s))
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = _snap(phi.phi(pts))
    # corners must agree exactly with node values
    corner = tuple(slice(None, None, s) for _ in range(grid.dim))
    vals[corner] = _snap(phi.phi(grid.nodes()))
    win = np.lib.stride_tricks.sliding_window_view(vals, (s + 1,) * grid.dim)
    win = win[tuple(slice(None, None, s) for _ in range(grid.dim))]
    red = tuple(range(grid.dim, 2 * grid.dim))
    return (win.min(axis=red) <= 0.0) & (win.max(axis=red) >= 0.0)


def _cell_vertex_mask(cells: np.ndarray, shape: tuple) -> np.ndarray:
    """Nodes that are a vertex of at least one flagged cell."""
    out = np.zeros(shape, dtype=bool)
    d = cells.ndim
    for corner in np.ndindex(*(2,) * d):
        sl = tuple(slice(c, c + cells.shape[k]) for k, c in enumerate(corner))
        out[sl] |= cells
    return out


def _cells_with_vertex(nodes: np.ndarray) -> np.ndarray:
    """Cells having at least one flagged vertex."""
    d = nodes.ndim
    cshape = tuple(n - 1 for n in nodes.shape)
    out = np.zeros(cshape, dtype=bool)
    for corner in np.ndindex(*(2,) * d):
        sl = tuple(slice(c, c + cshape[k]) for k, c in enumerate(corner))
        out |= nodes[sl]
    return out


def distance_estimate(phi: LevelSet, x) -> np.ndarray:
    """First-order distance to the interface, ``|phi| / |grad phi|``."""
    x = np.asarray(x, dtype=float)
    g = np.linalg.norm(np.asarray(phi.grad(x), dtype=float).reshape(*x.shape), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(g > 0, np.abs(phi.phi(x)) / np.where(g > 0, g, 1.0), np.inf)


def _all_cells_mask(cells: np.ndarray, shape: tuple) -> np.ndarray:
    """Nodes all of whose surrounding cells are flagged (boundary nodes never)."""
    d = cells.ndim
    padded = np.pad(cells, 1, constant_values=False)
    out = np.ones(shape, dtype=bool)
    for corner in np.ndindex(*(2,) * d):
        sl = tuple(slice(c, c + shape[k]) for k, c in enumerate(corner))
        out &= padded[sl]
    return out


def _neighbor_any(mask: np.ndarray) -> np.ndarray:
    """True where any axis neighbour (3/5-point stencil) is flagged."""
    out = np.zeros_like(mask)
    for k in range(mask.ndim):
        fwd = [slice(None)] * mask.ndim
        bwd = [slice(None)] * mask.ndim
        fwd[k] = slice(1, None)
        bwd[k] = slice(None, -1)
        out[tuple(bwd)] |= mask[tuple(fwd)]
        out[tuple(fwd)] |= mask[tuple(bwd)]
    return out


def classify(
    phi: LevelSet,
    grid: GridSpec,
    band_width_cells: int = 1,
    *,
    allow_boundary_contact: bool = False,
    strict: bool = True,
    halfwidth: Optional[float] = None,
) -> RegionMap:
    """Label every grid node and pair the nodes straddling the interface.

    The band is every cell whose closure meets the interface, dilated by
    ``band_width_cells`` layers of cells (0 keeps only the cut cells).  Nodes surrounded entirely by band
    cells are band nodes; the remaining non-boundary nodes touching a band
    node become the Dirichlet frontier of their side.

    With ``strict=False`` the coverage check is skipped, which is only useful
    for inspecting very coarse grids.

    ``halfwidth`` adds a fixed physical layer on top of the cell layers: any
    cell with a vertex whose distance estimate ``|phi| / |grad phi|`` is below
    it joins the band.  This keeps the regular subdomains a fixed distance
    from the interface under refinement.
    """
    if band_width_cells < 0:
        raise ValueError("band_width_cells must be >= 0")
    if min(grid.counts) < 5:
        raise BandCoversDomain(f"grid {grid.counts} is too coarse to hold a band and both subdomains")
    phin = _snap(phi.phi(grid.nodes()))
    cut = cut_cells(phi, grid)
    boundary = grid.boundary_mask()
    if not allow_boundary_contact and np.any(_cell_vertex_mask(cut, grid.shape) & boundary):
        raise InterfaceTouchesBoundary(
            f"interface meets a boundary cell on grid {grid.counts}"
        )
    structure = np.ones((3,) * grid.dim, dtype=bool)
    band = cut
    if band_width_cells > 0:
        band = ndimage.binary_dilation(cut, structure=structure, iterations=band_width_cells)
    if halfwidth is not None and halfwidth > 0:
        near = distance_estimate(phi, grid.nodes()) < halfwidth
        band = band | _cells_with_vertex(near)
    inner = _all_cells_mask(band, grid.shape) & ~boundary

    labels = np.empty(grid.shape, dtype=np.int8)
    minus = phin < 0
    labels[inner & minus] = Label.BAND_MINUS
    labels[inner & ~minus] = Label.BAND_PLUS
    rest = ~inner & ~boundary
    # vertices of cut cells never become unknowns; with at least one dilation
    # layer they are band nodes already, so this only matters for width 0
    front = rest & (_neighbor_any(inner) | _cell_vertex_mask(cut, grid.shape))
    labels[front & minus] = Label.GAMMA_MINUS
    labels[front & ~minus] = Label.GAMMA_PLUS
    labels[rest & ~front & minus] = Label.OMEGA1
    labels[rest & ~front & ~minus] = Label.OMEGA2
    labels[boundary] = Label.OUTER_BOUNDARY

    rmap = RegionMap(grid, labels, band, int(band_width_cells), phi_nodes=phin)
    if strict:
        empty = [lab.text for lab in (Label.OMEGA1, Label.OMEGA2) if rmap.count(lab) == 0]
        if empty:
            raise BandCoversDomain(
                f"no {' or '.join(empty)} node left on grid {grid.counts} "
                f"with band width {band_width_cells}"
            )
    rmap.node_pairs = pair_nodes(phi, grid, rmap)
    return rmap


def normals(phi: LevelSet, x) -> np.ndarray:
    """Unit normals pointing from the minus into the plus side, batched."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(phi.grad(x), dtype=float)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(norm <= NORMAL_TOL):
        bad = np.argwhere(norm[..., 0] <= NORMAL_TOL)[0]
        raise DegenerateNormal(f"level-set gradient vanishes near {x[tuple(bad)]}")
    return g / norm


def normal_at(phi: LevelSet, x) -> np.ndarray:
    return normals(phi, np.asarray(x, dtype=float))


def project_to_interface(phi: LevelSet, x, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Damped Newton descent along the level-set gradient onto ``phi = 0``.

    Accepts a single point or a batch; returns the same shape.
    """
    x = np.array(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x).copy()
    val = phi.phi(pts)
    active = np.abs(val) >= tol
    for _ in range(max_iter):
        if not active.any():
            break
        p = pts[active]
        v = val[active]
        g = phi.grad(p)
        gg = np.sum(g * g, axis=-1)
        if np.any(gg <= NORMAL_TOL**2):
            raise ProjectionFailed("level-set gradient vanished during projection")
        step = -(v / gg)[:, None] * g
        t = np.ones(len(p))
        trial = phi.phi(p + step)
        # halve the step where the residual does not shrink
        for _ in range(40):
            worse = np.abs(trial) > np.abs(v)
            if not worse.any():
                break
            t[worse] *= 0.5
            trial[worse] = phi.phi(p[worse] + t[worse, None] * step[worse])
        pts[active] = p + t[:, None] * step
        val[active] = trial
        active = np.abs(val) >= tol
    if active.any():
        # Newton can zigzag across a seam of a piecewise level set (star
        # corners); phi is still continuous along a ray, so bracket and bisect
        pts[active], val[active] = _ray_bisect(phi, pts[active], val[active], tol)
        active = np.abs(val) >= tol
    if active.any():
        raise ProjectionFailed(
            f"projection did not converge in {max_iter} iterations "
            f"(worst |phi| = {np.abs(val).max():.3e})"
        )
    return pts[0] if single else pts.reshape(x.shape)


def _ray_root(phi: LevelSet, p, v, d, tol: float, reach: float):
    """Bisection for ``phi = 0`` along ``p + t d``; ``t = inf`` where no sign change lies within ``reach``."""
    lo = np.zeros(len(p))
    hi = np.full(len(p), reach / 64)
    for _ in range(7):
        open_ = np.sign(phi.phi(p + hi[:, None] * d)) == np.sign(v)
        if not open_.any():
            break
        lo[open_] = hi[open_]
        hi[open_] *= 2
    found = np.sign(phi.phi(p + hi[:, None] * d)) != np.sign(v)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = phi.phi(p + mid[:, None] * d)
        if np.all(np.abs(fm[found]) < tol):
            break
        same = np.sign(fm) == np.sign(v)
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    t = np.where(found, 0.5 * (lo + hi), np.inf)
    return t


def _ray_bisect(phi: LevelSet, p, v, tol: float, reach: float = 4.0):
    """Nearest root of ``phi`` along a few rays: ``+-grad phi`` and the radial directions.

    The radial rays always cross an interface that is star-shaped about the
    origin, which covers the zigzag cases of the built-in piecewise sets.
    """
    g = phi.grad(p)
    candidates = []
    for vec in (g, p):
        norm = np.linalg.norm(vec, axis=-1)
        ok = norm > NORMAL_TOL
        unit = np.where(ok[:, None], vec / np.where(ok, norm, 1.0)[:, None], 0.0)
        candidates += [unit, -unit]
    best_t = np.full(len(p), np.inf)
    best_d = np.zeros_like(p)
    for d in candidates:
        live = np.any(d != 0, axis=-1)
        t = np.full(len(p), np.inf)
        if live.any():
            t[live] = _ray_root(phi, p[live], v[live], d[live], tol, reach)
        better = t < best_t
        best_t[better] = t[better]
        best_d[better] = d[better]
    hit = np.isfinite(best_t)
    out = p.copy()
    out[hit] = p[hit] + best_t[hit, None] * best_d[hit]
    val = v.copy()
    val[hit] = phi.phi(out[hit])
    return out, val


def pair_nodes(phi: LevelSet, grid: GridSpec, rmap: RegionMap) -> list:
    """Emit node pairs for every interface crossing of the grid.

    Grid edges whose end values have strictly opposite signs give one
    ``offset`` pair.  A node lying on the interface gives up to one
    ``through_node`` pair per axis, formed by its two axis neighbours when
    they lie on opposite sides.
    """
    phin = rmap.phi_nodes if rmap.phi_nodes is not None else _snap(phi.phi(grid.nodes()))
    pairs = []
    starts, feet_guess = [], []
    for k in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[k] = slice(None, -1)
        hi[k] = slice(1, None)
        a = phin[tuple(lo)]
        b = phin[tuple(hi)]
        cross = a * b < 0
        for idx in np.argwhere(cross):
            p = tuple(int(v) for v in idx)
            q = list(p)
            q[k] += 1
            q = tuple(q)
            pa, pb = phin[p], phin[q]
            xa, xb = grid.node(p), grid.node(q)
            guess = xa + (pa / (pa - pb)) * (xb - xa)
            minus, plus = (p, q) if pa < 0 else (q, p)
            starts.append((minus, plus))
            feet_guess.append(guess)
    if feet_guess:
        feet = project_to_interface(phi, np.array(feet_guess))
        for (minus, plus), foot in zip(starts, feet):
            pairs.append(NodePair(minus, plus, "offset", tuple(float(v) for v in foot)))

    interior = ~grid.boundary_mask()
    for idx in np.argwhere((phin == 0.0) & interior):
        c = tuple(int(v) for v in idx)
        foot = tuple(float(v) for v in grid.node(c))
        for k in range(grid.dim):
            lo = list(c)
            hi = list(c)
            lo[k] -= 1
            hi[k] += 1
            lo, hi = tuple(lo), tuple(hi)
            if phin[lo] * phin[hi] < 0:
                minus, plus = (lo, hi) if phin[lo] < 0 else (hi, lo)
                pairs.append(NodePair(minus, plus, "through_node", foot, center=c))
    return pairs
