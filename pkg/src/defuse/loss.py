"""Band losses: PDE residuals on both sides plus the node-pair jump terms.

All four terms are means of squared residuals.  Gradients flow back through
the optional anchoring and the jet propagation with :func:`param_gradient`,
so a single forward pass per side serves both the loss and its gradient.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NonFiniteLoss
from .geometry import normals, project_to_interface
from .jetnet import Jet, PairedNet, anchor, anchor_cotangent, distance_jet, forward_jet, param_gradient

AUTO_EPS = 1e-12


@dataclass
class SampleSet:
    """One training batch: random band points per side plus the grid pairs."""

    interior_minus: np.ndarray
    interior_plus: np.ndarray
    pairs: list
    seed: int = 0

    @property
    def counts(self) -> tuple:
        return len(self.interior_minus), len(self.interior_plus), 2 * len(self.pairs)


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0

    def __post_init__(self):
        for w in self.as_tuple():
            if not (np.isfinite(w) and w > 0):
                raise ValueError(f"loss weights must be positive and finite, got {self.as_tuple()}")

    def as_tuple(self) -> tuple:
        return (self.w1, self.w2, self.w3, self.w4)


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    l4: float
    total: float

    @property
    def terms(self) -> tuple:
        return (self.l1, self.l2, self.l3, self.l4)


def total_loss(weights: LossWeights, l1, l2, l3, l4) -> LossBreakdown:
    terms = (float(l1), float(l2), float(l3), float(l4))
    if not all(np.isfinite(t) for t in terms):
        raise NonFiniteLoss(f"non-finite loss term in {terms}", None)
    total = sum(w * t for w, t in zip(weights.as_tuple(), terms))
    return LossBreakdown(*terms, total)


def auto_weights(terms: Sequence[float], active: Optional[Sequence[bool]] = None) -> LossWeights:
    """Balance the terms by their initial size: ``w_i = 1 / max(l_i, eps)``.

    The weights are rescaled so the largest is one.  Terms flagged inactive
    (structurally zero, such as the value jump of a shared network) get
    weight one and take no part in the normalization.
    """
    terms = np.asarray(terms, dtype=float)
    active = np.ones(4, bool) if active is None else np.asarray(active, bool)
    raw = 1.0 / np.maximum(terms, AUTO_EPS)
    top = raw[active].max() if active.any() else 1.0
    w = np.where(active, raw / top, 1.0)
    # a term far below eps relative to the top underflows to zero
    w = np.maximum(w, np.finfo(float).tiny)
    return LossWeights(*(float(x) for x in w))


# -- residuals ---------------------------------------------------------------

def pde_residual(problem, side: str, x, jet: Jet) -> np.ndarray:
    """``-(grad beta . grad u + beta lap u) - f(x, u)`` for each point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    beta, gbeta = problem.beta(side, x)
    lap = np.trace(jet.hess, axis1=-2, axis2=-1)
    return -(np.sum(gbeta * jet.grad, axis=-1) + beta * lap) - problem.f(side, x, jet.value)


def _residual_cotangent(problem, side, x, jet, rbar):
    """Cotangents of ``sum(rbar * residual)`` with respect to the jet."""
    beta, gbeta = problem.beta(side, x)
    d = x.shape[1]
    vbar = -rbar * problem.df_du(side, x, jet.value)
    gbar = -rbar[:, None] * gbeta
    hbar = -(rbar * beta)[:, None, None] * np.eye(d)[None]
    return vbar, gbar, hbar


# -- side evaluation -----------------------------------------------------------

def is_anchored(net: PairedNet, side: str) -> bool:
    return side == "plus" or net.shared


@dataclass
class AnchorData:
    dist: np.ndarray
    dgrad: np.ndarray
    dhess: np.ndarray
    g_hat: np.ndarray


def anchor_data(problem, side: str, x) -> AnchorData:
    """Frozen foot points, ``g_hat`` there, and the distance jet."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x0 = project_to_interface(problem.phi, x)
    diff = np.linalg.norm(x - x0, axis=1)
    normal = None
    on = diff <= 1e-14
    if on.any():
        normal = np.zeros_like(x)
        sign = 1.0 if side == "plus" else -1.0
        normal[on] = sign * normals(problem.phi, x0[on])
    dist, dgrad, dhess = distance_jet(x, x0, normal)
    return AnchorData(dist, dgrad, dhess, np.asarray(problem.g_hat(x0), dtype=float))


def _take(a: AnchorData, idx) -> AnchorData:
    return AnchorData(a.dist[idx], a.dgrad[idx], a.dhess[idx], a.g_hat[idx])


def _concat(parts) -> AnchorData:
    return AnchorData(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("dist", "dgrad", "dhess", "g_hat")))


@dataclass
class SideEval:
    """Forward pass of one side's representation over a batch of points."""

    side: str
    x: np.ndarray
    jet: Jet
    tape: object
    anchor: Optional[AnchorData] = None

    def backprop(self, net: PairedNet, vbar, gbar, hbar) -> np.ndarray:
        if self.anchor is not None:
            a = self.anchor
            vbar, gbar, hbar = anchor_cotangent(a.dist, a.dgrad, a.dhess, vbar, gbar, hbar)
        return param_gradient(net.side(self.side), self.tape, vbar, gbar, hbar)


def evaluate_side(net: PairedNet, side: str, x, anchors: Optional[AnchorData] = None) -> SideEval:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    raw, tape = forward_jet(net.side(side), x, record=True)
    if is_anchored(net, side):
        if anchors is None:
            raise ValueError("anchored side needs anchor data")
        jet = anchor(raw, anchors.dist, anchors.dgrad, anchors.dhess, anchors.g_hat)
        return SideEval(side, x, jet, tape, anchors)
    return SideEval(side, x, raw, tape, None)


def side_values(problem, net: PairedNet, side: str, x) -> np.ndarray:
    """Network solution values on one side (anchoring included)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    anchors = anchor_data(problem, side, x) if is_anchored(net, side) else None
    return evaluate_side(net, side, x, anchors).jet.value


# -- pair data -------------------------------------------------------------------

@dataclass
class PairData:
    """Coordinates and jump targets of the interface node pairs."""

    minus_x: np.ndarray
    plus_x: np.ndarray
    normal: np.ndarray
    w: np.ndarray
    v: np.ndarray
    anchors: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.minus_x)


def pair_data(problem, grid, pairs) -> PairData:
    """Evaluate node coordinates, foot normals and the targets ``w, v``."""
    d = grid.dim
    if not pairs:
        empty = np.zeros((0, d))
        return PairData(empty, empty, empty, np.zeros(0), np.zeros(0))
    mx = np.array([grid.node(p.minus) for p in pairs], dtype=float).reshape(-1, d)
    px = np.array([grid.node(p.plus) for p in pairs], dtype=float).reshape(-1, d)
    foot = np.array([p.foot for p in pairs], dtype=float).reshape(-1, d)
    n = normals(problem.phi, foot)
    data = PairData(mx, px, n, np.asarray(problem.jump_w(foot), float), np.asarray(problem.jump_v(foot), float))
    data.anchors = {"minus": anchor_data(problem, "minus", mx), "plus": anchor_data(problem, "plus", px)}
    return data


# -- losses ------------------------------------------------------------------------

def _check(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteLoss(f"non-finite {what} at sample {int(bad[0])}", int(bad[0]))


def interior_loss(problem, net: PairedNet, side: str, points, anchors: Optional[AnchorData] = None):
    """Mean squared residual over ``points`` and its per-sample jet cotangents.

    Returns ``(value, (SideEval, vbar, gbar, hbar))``; the cotangents refer to
    the side's final (possibly anchored) jet.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if anchors is None and is_anchored(net, side):
        anchors = anchor_data(problem, side, points)
    ev = evaluate_side(net, side, points, anchors)
    r = pde_residual(problem, side, points, ev.jet)
    _check(r, f"{side} residual")
    m = len(r)
    value = float(np.mean(r * r)) if m else 0.0
    rbar = 2.0 * r / max(m, 1)
    return value, (ev,) + _residual_cotangent(problem, side, points, ev.jet, rbar)


def jump_terms(problem, jm: Jet, jp: Jet, pd: PairData):
    """Per-pair value and flux jump residuals."""
    bm = problem.beta("minus", pd.minus_x)[0]
    bp = problem.beta("plus", pd.plus_x)[0]
    j3 = jp.value - jm.value - pd.w
    j4 = bp * np.sum(jp.grad * pd.normal, axis=1) - bm * np.sum(jm.grad * pd.normal, axis=1) - pd.v
    return j3, j4, bm, bp


def jump_losses(problem, net: PairedNet, pairs, grid=None):
    """``(l3, l4, adjoints)`` over the node pairs.

    ``pairs`` may be a list of :class:`NodePair` (then ``grid`` is needed) or
    a prepared :class:`PairData`.  With a shared network the value jump is
    zero by construction and reported as such.
    """
    pd = pairs if isinstance(pairs, PairData) else pair_data(problem, grid, pairs)
    if len(pd) == 0:
        return 0.0, 0.0, None
    em = evaluate_side(net, "minus", pd.minus_x, pd.anchors.get("minus"))
    ep = evaluate_side(net, "plus", pd.plus_x, pd.anchors.get("plus"))
    j3, j4, bm, bp = jump_terms(problem, em.jet, ep.jet, pd)
    _check(j3, "value jump")
    _check(j4, "flux jump")
    k = len(pd)
    l3 = 0.0 if net.shared else float(np.mean(j3 * j3))
    l4 = float(np.mean(j4 * j4))
    return l3, l4, (em, ep, j3, j4, bm, bp)


def _jump_cotangents(pd, j3, j4, bm, bp, w3, w4, shared):
    k = len(pd)
    c3 = np.zeros(k) if shared else 2.0 * w3 * j3 / k
    c4 = 2.0 * w4 * j4 / k
    d = pd.normal.shape[1]
    plus = (c3, (c4 * bp)[:, None] * pd.normal, np.zeros((k, d, d)))
    minus = (-c3, -(c4 * bm)[:, None] * pd.normal, np.zeros((k, d, d)))
    return minus, plus


@dataclass
class LossProblem:
    """Problem plus prepared pair data; evaluates the loss and its gradient."""

    problem: object
    pairs: PairData

    @classmethod
    def build(cls, problem, rmap) -> "LossProblem":
        return cls(problem, pair_data(problem, rmap.grid, rmap.node_pairs))

    def batch_anchors(self, net: PairedNet, samples: SampleSet) -> dict:
        out = {}
        for side, pts in (("minus", samples.interior_minus), ("plus", samples.interior_plus)):
            if is_anchored(net, side):
                out[side] = anchor_data(self.problem, side, pts)
        return out

    def terms(self, net: PairedNet, samples: SampleSet, anchors: Optional[dict] = None) -> tuple:
        return self.evaluate(net, samples, LossWeights(), anchors, gradient=False)[0].terms

    def evaluate(self, net: PairedNet, samples: SampleSet, weights: LossWeights,
                 anchors: Optional[dict] = None, gradient: bool = True):
        """Return ``(LossBreakdown, flat gradient or None)``.

        One forward pass per side covers the random points and that side's
        pair nodes, which enter both the residual mean and the jump terms.
        """
        problem, pd = self.problem, self.pairs
        if anchors is None:
            anchors = self.batch_anchors(net, samples)
        k = len(pd)
        evals, resid = {}, {}
        for side, pts, nodes in (("minus", samples.interior_minus, pd.minus_x),
                                 ("plus", samples.interior_plus, pd.plus_x)):
            x = np.concatenate([np.asarray(pts, dtype=float).reshape(-1, problem.dim), nodes])
            anc = None
            if is_anchored(net, side):
                anc = _concat([anchors[side], pd.anchors[side]])
            ev = evaluate_side(net, side, x, anc)
            r = pde_residual(problem, side, x, ev.jet)
            _check(r, f"{side} residual")
            evals[side], resid[side] = ev, r
        l1 = float(np.mean(resid["minus"] ** 2)) if len(resid["minus"]) else 0.0
        l2 = float(np.mean(resid["plus"] ** 2)) if len(resid["plus"]) else 0.0
        l3 = l4 = 0.0
        if k:
            jm = evals["minus"].jet[-k:]
            jp = evals["plus"].jet[-k:]
            j3, j4, bm, bp = jump_terms(problem, jm, jp, pd)
            _check(j3, "value jump")
            _check(j4, "flux jump")
            l3 = 0.0 if net.shared else float(np.mean(j3 * j3))
            l4 = float(np.mean(j4 * j4))
        breakdown = total_loss(weights, l1, l2, l3, l4)
        if not gradient:
            return breakdown, None

        grads = {}
        for side, w in (("minus", weights.w1), ("plus", weights.w2)):
            ev, r = evals[side], resid[side]
            rbar = 2.0 * w * r / max(len(r), 1)
            vbar, gbar, hbar = _residual_cotangent(problem, side, ev.x, ev.jet, rbar)
            grads[side] = [vbar, gbar, hbar]
        if k:
            cm, cp = _jump_cotangents(pd, j3, j4, bm, bp, weights.w3, weights.w4, net.shared)
            for side, c in (("minus", cm), ("plus", cp)):
                for slot in range(3):
                    grads[side][slot][-k:] += c[slot]
        gm = evals["minus"].backprop(net, *grads["minus"])
        gp = evals["plus"].backprop(net, *grads["plus"])
        flat = gm + gp if net.shared else np.concatenate([gm, gp])
        return breakdown, flat


def history_csv(history) -> str:
    """Loss history as CSV with columns ``step,l1,l2,l3,l4,total``."""
    buf = io.StringIO()
    buf.write("step,l1,l2,l3,l4,total\n")
    for step, b in enumerate(history):
        buf.write(f"{step},{b.l1:.17g},{b.l2:.17g},{b.l3:.17g},{b.l4:.17g},{b.total:.17g}\n")
    return buf.getvalue()
