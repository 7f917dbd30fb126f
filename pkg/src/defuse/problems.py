"""Built-in interface problems and error measurement against exact solutions.

Every source term below was obtained by expanding ``-div(beta grad u)`` for
the stated exact solution by hand; ``tests/test_problems.py`` re-derives them
symbolically.  For the 1D problems write ``s = sqrt(1 - x)``, ``t = sqrt(x - 1)``
and ``y = 1 - x``:

* ex4_1: ``beta u' = e^s / 2`` on the minus side and ``e^t / 2`` on the plus
  side, so ``f- = e^s / (4 s)`` and ``f+ = -e^t / (4 t)``.
* ex4_2: ``beta- u-' = -(2/3) tau- e^{y^(2/3)}`` gives
  ``f- = -(4/9) tau- y^(-1/3) e^{y^(2/3)}``; the plus side is ex4_1's times tau+.

In 2D with ``f = -(grad beta . grad u + beta lap u)``:

* ex4_3: ``f- = -4 tau- (r^2 sin q + 1 - cos q)``, ``q = r^2 - 1/4``;
  ``f+ = tau+ (12 - 8 x1 x2)``.
* ex4_4: ``lap r^3 = 9 r`` so ``f = -9 r`` on both sides.
* ex4_5 / ex4_7 minus side: ``f- = 8 x2^2 - 8 x1^2 - 12``; ex4_5 plus side
  ``f+ = 8 x1 x2 + 8``; ex4_7 plus side ``f+ = 0`` where ``x1 + x2 > 0`` and
  ``16 (sin s + cos s)`` otherwise, ``s = x1 + x2``.
* ex4_8 plus side: ``f+ = -(2 cos s (s + cos s) + (2 + sin s)(4 - 2 sin s))``.
* ex4_9 / ex4_10 expand the same formula numerically from the exact jets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NoExactSolution, UnknownParam, UnknownProblem
from .fdsolver import apply_stencil
from .geometry import Label, LevelSet, classify, interface_point, normals, project_to_interface
from .jetnet import Jet

SIDES = ("minus", "plus")


@dataclass(frozen=True)
class ProblemSpec:
    """Closed-form description of one interface problem.

    ``beta_*`` return ``(value, grad)``; ``f_*`` take ``(x, u)``; ``exact_*``
    return a :class:`Jet` or are ``None``.  ``g`` is the Dirichlet data on the
    outer boundary and ``g_hat`` its extension used by the anchored ansatz.
    """

    name: str
    dim: int
    bounds: tuple
    phi: LevelSet
    beta_minus: Callable
    beta_plus: Callable
    f_minus: Callable
    f_plus: Callable
    jump_w: Callable
    jump_v: Callable
    g: Callable
    g_hat: Callable
    exact_minus: Optional[Callable] = None
    exact_plus: Optional[Callable] = None
    df_du_minus: Optional[Callable] = None
    df_du_plus: Optional[Callable] = None
    shared: bool = False
    touches_boundary: bool = False
    band_cells: int = 1
    band_halfwidth: Optional[float] = None
    degenerate: bool = False
    jump_type: str = "homogeneous"
    params: dict = field(default_factory=dict)

    @property
    def has_exact(self) -> bool:
        return self.exact_minus is not None and self.exact_plus is not None

    def beta(self, side, x):
        return (self.beta_minus if side == "minus" else self.beta_plus)(np.atleast_2d(x))

    def f(self, side, x, u):
        return (self.f_minus if side == "minus" else self.f_plus)(np.atleast_2d(x), u)

    def df_du(self, side, x, u):
        fn = self.df_du_minus if side == "minus" else self.df_du_plus
        if fn is None:
            return np.zeros(len(np.atleast_2d(x)))
        return fn(np.atleast_2d(x), u)

    def exact(self, side, x) -> Jet:
        fn = self.exact_minus if side == "minus" else self.exact_plus
        if fn is None:
            raise NoExactSolution(f"{self.name} has no exact solution")
        return fn(np.atleast_2d(x))


# -- small jet helpers ---------------------------------------------------------

def _jet(value, grad, hess):
    return Jet(np.asarray(value, float), np.asarray(grad, float), np.asarray(hess, float))


def _const(c):
    def fn(x):
        n, d = x.shape
        return _jet(np.full(n, float(c)), np.zeros((n, d)), np.zeros((n, d, d)))
    return fn


def _r2(x):
    n = len(x)
    return _jet(np.sum(x * x, axis=1), 2 * x, np.broadcast_to(2 * np.eye(2), (n, 2, 2)).copy())


def _sin_sum(x):
    s = x[:, 0] + x[:, 1]
    ones = np.ones((len(x), 2, 2))
    return _jet(np.sin(s), np.cos(s)[:, None] * np.ones((len(x), 2)), -np.sin(s)[:, None, None] * ones)


def _lin(a, j1, b=None, j2=None):
    """Linear combination ``a*j1 + b*j2`` of jets (``j1`` may be a constant)."""
    if j2 is None:
        return _jet(a * j1.value, a * j1.grad, a * j1.hess)
    return _jet(a * j1.value + b * j2.value, a * j1.grad + b * j2.grad, a * j1.hess + b * j2.hess)


def _shift(j, c):
    return _jet(j.value + c, j.grad, j.hess)


def _sq_dist_beta(center, scale=1.0):
    c = np.asarray(center, float)

    def beta(x):
        diff = x - c
        return scale * np.sum(diff * diff, axis=1), scale * 2 * diff
    return beta


def _source_from(beta, exact):
    """``-(grad beta . grad u + beta lap u)`` from analytic jets."""
    def f(x, u=None):
        b, gb = beta(x)
        j = exact(x)
        return -(np.sum(gb * j.grad, axis=1) + b * np.trace(j.hess, axis1=1, axis2=2))
    return f


def _x_only(fn):
    return lambda x, u=None: fn(x)


def _by_side(phi, minus_fn, plus_fn):
    def fn(x):
        x = np.atleast_2d(x)
        out = np.empty(len(x))
        neg = phi.phi(x) < 0
        if neg.any():
            out[neg] = minus_fn(x[neg])
        if (~neg).any():
            out[~neg] = plus_fn(x[~neg])
        return out
    return fn


def _jumps_from_exact(phi, beta_m, beta_p, ex_m, ex_p):
    def w(x):
        return ex_p(x).value - ex_m(x).value

    def v(x):
        n = normals(phi, x)
        jm, jp = ex_m(x), ex_p(x)
        return beta_p(x)[0] * np.sum(jp.grad * n, axis=1) - beta_m(x)[0] * np.sum(jm.grad * n, axis=1)
    return w, v


# -- level sets ----------------------------------------------------------------

def circle_levelset(radius=0.5) -> LevelSet:
    r2 = radius * radius
    return LevelSet(2, lambda x: np.sum(x * x, axis=-1) - r2, lambda x: 2 * np.asarray(x, float), "circle")


def flower_levelset() -> LevelSet:
    c = 0.02 * np.sqrt(5.0)

    def phi(x):
        X = x - c
        th = np.arctan2(X[..., 1], X[..., 0])
        R = 0.5 + 0.2 * np.sin(5 * th)
        return np.sum(X * X, axis=-1) - R * R

    def grad(x):
        X = np.asarray(x, float) - c
        rho2 = np.sum(X * X, axis=-1)
        th = np.arctan2(X[..., 1], X[..., 0])
        R = 0.5 + 0.2 * np.sin(5 * th)
        dR = np.cos(5 * th)
        safe = np.where(rho2 > 0, rho2, 1.0)
        dth = np.stack([-X[..., 1], X[..., 0]], axis=-1) / safe[..., None]
        g = 2 * X - (2 * R * dR)[..., None] * dth
        return np.where((rho2 > 0)[..., None], g, 0.0)

    return LevelSet(2, phi, grad, "flower")


def kinked_line_levelset() -> LevelSet:
    def phi(x):
        s = x[..., 0] + x[..., 1]
        return np.where(s > 0, x[..., 1] - 2 * x[..., 0], x[..., 1] + 0.5 * x[..., 0])

    def grad(x):
        x = np.asarray(x, float)
        s = x[..., 0] + x[..., 1]
        upper = np.stack([np.full_like(s, -2.0), np.ones_like(s)], axis=-1)
        lower = np.stack([np.full_like(s, 0.5), np.ones_like(s)], axis=-1)
        return np.where((s > 0)[..., None], upper, lower)

    return LevelSet(2, phi, grad, "sharp_edge")


STAR_TIP_ANGLE = np.pi / 5
STAR_ROTATION = np.pi / 7
STAR_RADIUS = 6.0 / 7.0


def star_levelset(R=STAR_RADIUS, theta_t=STAR_TIP_ANGLE, theta_r=STAR_ROTATION) -> LevelSet:
    """Five-pointed star, positive inside; edges are straight segments."""
    half = theta_t / 2
    arm = 2 * np.pi / 5

    def _offset(x):
        th = np.arctan2(x[..., 1], x[..., 0])
        return (th - theta_r + np.pi / 5) % arm - np.pi / 5

    def phi(x):
        a = np.abs(_offset(x))
        r = np.sqrt(np.sum(x * x, axis=-1))
        return R * np.sin(half) / np.sin(half + a) - r

    def grad(x):
        x = np.asarray(x, float)
        a = _offset(x)
        sgn = np.where(a >= 0, 1.0, -1.0)
        aa = np.abs(a)
        drs = -R * np.sin(half) * np.cos(half + aa) / np.sin(half + aa) ** 2 * sgn
        r2 = np.sum(x * x, axis=-1)
        safe = np.where(r2 > 0, r2, 1.0)
        dth = np.stack([-x[..., 1], x[..., 0]], axis=-1) / safe[..., None]
        g = drs[..., None] * dth - x / np.sqrt(safe)[..., None]
        return np.where((r2 > 0)[..., None], g, 0.0)

    return LevelSet(2, phi, grad, "star")


SQUARE = ((-1.0, 1.0), (-1.0, 1.0))
INTERVAL = ((0.0, 2.0),)


# -- 1D problems ---------------------------------------------------------------

def _ex4_1(tau_minus=1.0, tau_plus=1.0):
    tm, tp = float(tau_minus), float(tau_plus)
    phi = interface_point(1.0)

    def sm(x):
        return np.sqrt(np.maximum(1.0 - x[:, 0], 0.0))

    def sp(x):
        return np.sqrt(np.maximum(x[:, 0] - 1.0, 0.0))

    def ex_m(x):
        s = sm(x)
        e = np.exp(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            return _jet((1 - e) / tm, (e / (2 * s * tm))[:, None], (-e * (s - 1) / (4 * s**3 * tm))[:, None, None])

    def ex_p(x):
        t = sp(x)
        e = np.exp(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return _jet((e - 1) / tp, (e / (2 * t * tp))[:, None], (e * (t - 1) / (4 * t**3 * tp))[:, None, None])

    def beta_m(x):
        s = sm(x)
        with np.errstate(divide="ignore"):
            return tm * s, (-tm / (2 * s))[:, None]

    def beta_p(x):
        t = sp(x)
        with np.errstate(divide="ignore"):
            return tp * t, (tp / (2 * t))[:, None]

    def f_m(x, u=None):
        s = sm(x)
        with np.errstate(divide="ignore"):
            return np.exp(s) / (4 * s)

    def f_p(x, u=None):
        t = sp(x)
        with np.errstate(divide="ignore"):
            return -np.exp(t) / (4 * t)

    zero = lambda x: np.zeros(len(np.atleast_2d(x)))
    g = _by_side(phi, lambda x: ex_m(x).value, lambda x: ex_p(x).value)
    return ProblemSpec(
        "ex4_1", 1, INTERVAL, phi, beta_m, beta_p, f_m, f_p, zero, zero, g,
        lambda x: ex_p(np.atleast_2d(x)).value, ex_m, ex_p,
        shared=True, band_cells=0, band_halfwidth=0.2, degenerate=True, jump_type="homogeneous",
        params={"tau_minus": tm, "tau_plus": tp},
    )


def _ex4_2(tau_minus=1.0, tau_plus=1.0):
    tm, tp = float(tau_minus), float(tau_plus)
    phi = interface_point(1.0)

    def ym(x):
        return np.maximum(1.0 - x[:, 0], 0.0)

    def sp(x):
        return np.sqrt(np.maximum(x[:, 0] - 1.0, 0.0))

    def ex_m(x):
        y = ym(x)
        e = np.exp(np.cbrt(y) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = -(2.0 / 3.0) * e / np.cbrt(y)
            d2 = -(2.0 / 3.0) * e * (y ** (-4.0 / 3.0) / 3.0 - (2.0 / 3.0) * y ** (-2.0 / 3.0))
        return _jet(e, d1[:, None], d2[:, None, None])

    def ex_p(x):
        t = sp(x)
        e = np.exp(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return _jet(e + 5.0, (e / (2 * t))[:, None], (e * (t - 1) / (4 * t**3))[:, None, None])

    def beta_m(x):
        y = ym(x)
        with np.errstate(divide="ignore"):
            return tm * np.cbrt(y), (-(tm / 3.0) * y ** (-2.0 / 3.0))[:, None]

    def beta_p(x):
        t = sp(x)
        with np.errstate(divide="ignore"):
            return tp * t, (tp / (2 * t))[:, None]

    def f_m(x, u=None):
        y = ym(x)
        with np.errstate(divide="ignore"):
            return -(4.0 / 9.0) * tm * np.exp(np.cbrt(y) ** 2) / np.cbrt(y)

    def f_p(x, u=None):
        t = sp(x)
        with np.errstate(divide="ignore"):
            return -tp * np.exp(t) / (4 * t)

    v_const = 0.5 * tp + (2.0 / 3.0) * tm
    g = _by_side(phi, lambda x: ex_m(x).value, lambda x: ex_p(x).value)
    return ProblemSpec(
        "ex4_2", 1, INTERVAL, phi, beta_m, beta_p, f_m, f_p,
        lambda x: np.full(len(np.atleast_2d(x)), 5.0),
        lambda x: np.full(len(np.atleast_2d(x)), v_const),
        g, lambda x: ex_p(np.atleast_2d(x)).value, ex_m, ex_p,
        band_cells=0, band_halfwidth=0.2, degenerate=True, jump_type="nonhomogeneous",
        params={"tau_minus": tm, "tau_plus": tp},
    )


# -- 2D problems ---------------------------------------------------------------

def _assemble_2d(name, phi, beta_m, beta_p, ex_m, ex_p, f_m=None, f_p=None, **kw):
    f_m = f_m or _source_from(beta_m, ex_m)
    f_p = f_p or _source_from(beta_p, ex_p)
    w, v = _jumps_from_exact(phi, beta_m, beta_p, ex_m, ex_p)
    g = _by_side(phi, lambda x: ex_m(x).value, lambda x: ex_p(x).value)
    g_hat = lambda x: ex_p(np.atleast_2d(x)).value
    return ProblemSpec(name, 2, SQUARE, phi, beta_m, beta_p, f_m, f_p, w, v, g, g_hat, ex_m, ex_p, **kw)


def _ex4_3(tau_minus=1.0, tau_plus=1.0):
    tm, tp = float(tau_minus), float(tau_plus)

    def beta_m(x):
        q = np.sum(x * x, axis=1) - 0.25
        return tm * (1 - np.cos(q)), (tm * 2 * np.sin(q))[:, None] * x

    def beta_p(x):
        return tp * (3 - x[:, 0] * x[:, 1]), tp * np.stack([-x[:, 1], -x[:, 0]], axis=1)

    def f_m(x, u=None):
        r2 = np.sum(x * x, axis=1)
        q = r2 - 0.25
        return -4 * tm * (r2 * np.sin(q) + 1 - np.cos(q))

    def f_p(x, u=None):
        return tp * (12 - 8 * x[:, 0] * x[:, 1])

    return _assemble_2d(
        "ex4_3", circle_levelset(), beta_m, beta_p,
        lambda x: _shift(_r2(x), 2.0), lambda x: _shift(_lin(-1.0, _r2(x)), 1.0), f_m, f_p,
        band_cells=0, band_halfwidth=0.09, degenerate=True, jump_type="nonhomogeneous",
        params={"tau_minus": tm, "tau_plus": tp},
    )


def _r3(x):
    r = np.sqrt(np.sum(x * x, axis=1))
    safe = np.where(r > 0, r, 1.0)
    outer = x[:, :, None] * x[:, None, :] / safe[:, None, None]
    hess = 3 * (r[:, None, None] * np.eye(2)[None] + outer)
    return _jet(r**3, 3 * r[:, None] * x, hess)


def _ex4_4(tau_minus=1.0, tau_plus=1.0):
    bm, bp = float(tau_minus), float(tau_plus)
    shift = (1 / bm - 1 / bp) * 0.125
    neg9r = lambda x, u=None: -9 * np.sqrt(np.sum(x * x, axis=1))
    return _assemble_2d(
        "ex4_4", circle_levelset(),
        lambda x: (np.full(len(x), bm), np.zeros_like(x)),
        lambda x: (np.full(len(x), bp), np.zeros_like(x)),
        lambda x: _lin(1 / bm, _r3(x)), lambda x: _shift(_lin(1 / bp, _r3(x)), shift),
        neg9r, neg9r,
        shared=True, band_cells=0, band_halfwidth=0.05, jump_type="homogeneous",
        params={"tau_minus": bm, "tau_plus": bp},
    )


def _beta_saddle(x):
    return (x[:, 0] ** 2 - x[:, 1] ** 2 + 3) / 7, np.stack([2 * x[:, 0], -2 * x[:, 1]], axis=1) / 7


def _f_saddle(x, u=None):
    return 8 * x[:, 1] ** 2 - 8 * x[:, 0] ** 2 - 12


def _ex4_5():
    def beta_p(x):
        return (x[:, 0] * x[:, 1] + 2) / 5, np.stack([x[:, 1], x[:, 0]], axis=1) / 5

    return _assemble_2d(
        "ex4_5", flower_levelset(), _beta_saddle, beta_p,
        lambda x: _shift(_lin(7.0, _r2(x)), 6.0), lambda x: _shift(_lin(-5.0, _r2(x)), 5.0),
        _f_saddle, lambda x, u=None: 8 * x[:, 0] * x[:, 1] + 8,
        jump_type="nonhomogeneous",
    )


# Nodes on the kink line x1 + x2 = 0 see both one-sided Laplacians through
# the symmetric stencil, so the source there is the mean of the two limits.
KINK_TOL = 1e-12


def _ex4_7():
    def ex_p(x):
        s = x[:, 0] + x[:, 1]
        up = s > 0
        ones2 = np.ones((len(x), 2))
        val = np.where(up, s + 1, np.sin(s) + np.cos(s))
        d1 = np.where(up, 1.0, np.cos(s) - np.sin(s))
        d2 = np.where(up, 0.0, -np.sin(s) - np.cos(s))
        return _jet(val, d1[:, None] * ones2, d2[:, None, None] * np.ones((len(x), 2, 2)))

    def f_p(x, u=None):
        s = x[:, 0] + x[:, 1]
        s = np.where(np.abs(s) < KINK_TOL, 0.0, s)
        lower = 16 * (np.sin(s) + np.cos(s))
        return np.where(s > 0, 0.0, np.where(s < 0, lower, 0.5 * lower))

    return _assemble_2d(
        "ex4_7", kinked_line_levelset(), _beta_saddle,
        lambda x: (np.full(len(x), 8.0), np.zeros_like(x)),
        lambda x: _shift(_lin(7.0, _r2(x)), 6.0), ex_p, _f_saddle, f_p,
        touches_boundary=True, band_cells=0, band_halfwidth=0.1, jump_type="nonhomogeneous",
    )


def _beta_star_plus(x):
    s = x[:, 0] + x[:, 1]
    return 2 + np.sin(s), np.cos(s)[:, None] * np.ones((len(x), 2))


def _star_u_plus(x):
    return _lin(1.0, _r2(x), 1.0, _sin_sum(x))


def _f_star_plus(x, u=None):
    s = x[:, 0] + x[:, 1]
    return -(2 * np.cos(s) * (s + np.cos(s)) + (2 + np.sin(s)) * (4 - 2 * np.sin(s)))


def _ex4_8():
    return _assemble_2d(
        "ex4_8", star_levelset(),
        lambda x: (np.ones(len(x)), np.zeros_like(x)), _beta_star_plus,
        _const(8.0), _star_u_plus, lambda x, u=None: np.zeros(len(x)), _f_star_plus,
        jump_type="nonhomogeneous",
    )


DEGENERATE_MINUS_POINT = (6 / 7, 6 / 7)
_c = 6 * np.sin(np.pi / 10) / (7 * np.sin(np.pi / 3))
DEGENERATE_PLUS_POINT = (_c, _c)


def _sinsin(x):
    a, b = 2 * np.pi * x[:, 0], 2 * np.pi * x[:, 1]
    k = 2 * np.pi
    val = 6 + np.sin(a) * np.sin(b)
    grad = k * np.stack([np.cos(a) * np.sin(b), np.sin(a) * np.cos(b)], axis=1)
    h = np.empty((len(x), 2, 2))
    h[:, 0, 0] = h[:, 1, 1] = -k * k * np.sin(a) * np.sin(b)
    h[:, 0, 1] = h[:, 1, 0] = k * k * np.cos(a) * np.cos(b)
    return _jet(val, grad, h)


def _ex4_9():
    return _assemble_2d(
        "ex4_9", star_levelset(),
        _sq_dist_beta(DEGENERATE_MINUS_POINT), _sq_dist_beta(DEGENERATE_PLUS_POINT),
        _sinsin, _star_u_plus, degenerate=True, jump_type="nonhomogeneous",
    )


def _ex4_10(tau_minus=1.0, tau_plus=1.0):
    tm, tp = float(tau_minus), float(tau_plus)
    return _assemble_2d(
        "ex4_10", star_levelset(),
        _sq_dist_beta(DEGENERATE_MINUS_POINT, tm), _sq_dist_beta(DEGENERATE_PLUS_POINT, tp),
        lambda x: _shift(_lin(7.0, _r2(x)), 6.0), _star_u_plus,
        degenerate=True, jump_type="nonhomogeneous", params={"tau_minus": tm, "tau_plus": tp},
    )


def _ex4_11():
    base = _ex4_8()
    phi = base.phi

    def f_m(x, u=None):
        x = np.atleast_2d(x)
        d = np.linalg.norm(x - project_to_interface(phi, x), axis=1)
        out = np.zeros(len(x))
        pos = d > 0
        out[pos] = d[pos] * (1 + 2 * np.log(d[pos]))
        return out

    return ProblemSpec(
        "ex4_11", 2, SQUARE, phi, base.beta_minus, base.beta_plus, f_m, base.f_plus,
        base.jump_w, base.jump_v, base.g, base.g_hat, None, None,
        jump_type="nonhomogeneous",
    )


_REGISTRY = {
    "ex4_1": (_ex4_1, ("tau_minus", "tau_plus")),
    "ex4_2": (_ex4_2, ("tau_minus", "tau_plus")),
    "ex4_3": (_ex4_3, ("tau_minus", "tau_plus")),
    "ex4_4": (_ex4_4, ("tau_minus", "tau_plus")),
    "ex4_5": (_ex4_5, ()),
    "ex4_7": (_ex4_7, ()),
    "ex4_8": (_ex4_8, ()),
    "ex4_9": (_ex4_9, ()),
    "ex4_10": (_ex4_10, ("tau_minus", "tau_plus")),
    "ex4_11": (_ex4_11, ()),
}


def problem_names() -> list:
    return list(_REGISTRY)


def tunables(name: str) -> tuple:
    if name not in _REGISTRY:
        raise UnknownProblem(f"unknown problem {name!r}; known: {', '.join(_REGISTRY)}")
    return _REGISTRY[name][1]


def get_problem(name: str, **params) -> ProblemSpec:
    """Build a registered problem, overriding its tunable coefficients."""
    allowed = tunables(name)
    for key in params:
        if key not in allowed:
            raise UnknownParam(f"{name} has no parameter {key!r} (tunable: {', '.join(allowed) or 'none'})")
    return _REGISTRY[name][0](**params)


def region_map(problem: ProblemSpec, grid, band_cells: Optional[int] = None,
               halfwidth: Optional[float] = None, strict: bool = True):
    """Classify ``grid`` for ``problem``.

    Without ``band_cells`` the problem's recommended band is used (with
    ``halfwidth`` overriding the recommended halfwidth when given); an
    explicit ``band_cells`` replaces the recommendation and applies
    ``halfwidth`` as given.
    """
    if band_cells is None:
        band_cells = problem.band_cells
        halfwidth = problem.band_halfwidth if halfwidth is None else halfwidth
    return classify(problem.phi, grid, band_cells, allow_boundary_contact=problem.touches_boundary,
                    strict=strict, halfwidth=halfwidth)


# -- error metrics -------------------------------------------------------------

REGION_LABELS = {
    "omega1": (Label.OMEGA1, Label.GAMMA_MINUS),
    "omega2": (Label.OMEGA2, Label.GAMMA_PLUS),
    "omega": (Label.OMEGA1, Label.GAMMA_MINUS, Label.BAND_MINUS, Label.BAND_PLUS, Label.GAMMA_PLUS, Label.OMEGA2),
}
MINUS_LABELS = (Label.OMEGA1, Label.GAMMA_MINUS, Label.BAND_MINUS)


def discrete_l2(values, grid) -> float:
    """``sqrt(h1 h2 sum e^2)`` (``sqrt(h sum e^2)`` in 1D)."""
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(grid.cell_volume * np.sum(values * values)))


def node_sides(rmap) -> np.ndarray:
    """``True`` where a node belongs to the minus side."""
    minus = rmap.mask(*MINUS_LABELS)
    boundary = rmap.mask(Label.OUTER_BOUNDARY)
    phin = rmap.phi_nodes
    minus[boundary] = phin[boundary] < 0
    return minus


def exact_nodal(problem: ProblemSpec, rmap) -> np.ndarray:
    """Exact solution at every node, picking the branch of the node's side."""
    nodes = rmap.grid.nodes().reshape(-1, problem.dim)
    minus = node_sides(rmap).ravel()
    out = np.empty(len(nodes))
    if minus.any():
        out[minus] = problem.exact("minus", nodes[minus]).value
    if (~minus).any():
        out[~minus] = problem.exact("plus", nodes[~minus]).value
    return out.reshape(rmap.grid.shape)


def exact_error(u_h, problem: ProblemSpec, rmap, region: str = "omega"):
    """Discrete L2 and max-norm of ``u_h - u`` over a region.

    ``u_h`` is a full nodal array (NaN outside the solved region is fine as
    long as the region itself is covered).
    """
    if not problem.has_exact:
        raise NoExactSolution(f"{problem.name} has no exact solution; use residual_metric")
    mask = rmap.mask(*REGION_LABELS[region])
    err = (np.asarray(u_h, float) - exact_nodal(problem, rmap))[mask]
    if err.size == 0:
        return 0.0, 0.0
    if not np.all(np.isfinite(err)):
        raise ValueError(f"numerical solution does not cover region {region}")
    return discrete_l2(err, rmap.grid), float(np.max(np.abs(err)))


def residual_metric(u_h, problem: ProblemSpec, rmap, region: str = "omega") -> float:
    """Discrete L2 norm of ``f_h - f``, with ``f_h`` the stencil applied to ``u_h``.

    Only nodes whose whole stencil lies on their own side are used, so the
    stencil never straddles the interface.
    """
    grid = rmap.grid
    u = np.asarray(u_h, dtype=float)
    minus = node_sides(rmap)
    interior = ~rmap.mask(Label.OUTER_BOUNDARY)
    same = interior.copy()
    for k in range(grid.dim):
        for step in (-1, 1):
            shifted = np.roll(minus, -step, axis=k)
            same &= shifted == minus
    mask = same & rmap.mask(*REGION_LABELS[region]) & np.isfinite(u)
    flat = np.flatnonzero(mask)
    if flat.size == 0:
        return 0.0
    nodes = grid.nodes().reshape(-1, grid.dim)
    res = np.empty(flat.size)
    mflat = minus.ravel()[flat]
    for side, sel in (("minus", mflat), ("plus", ~mflat)):
        if sel.any():
            idx = flat[sel]
            fh = apply_stencil(problem, side, grid, u, idx)
            res[sel] = fh - problem.f(side, nodes[idx], u.ravel()[idx])
    if not np.all(np.isfinite(res)):
        raise ValueError("residual metric needs u_h on one stencil layer around the region")
    return discrete_l2(res, grid)
