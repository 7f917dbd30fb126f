"""Finite-difference oracles for the jet propagation and the loss gradient.

Both checks draw seeded random instances and reject draws where some ELU
pre-activation sits within ``KINK_MARGIN`` of zero, since the second
derivative jumps there and differences straddling the kink are meaningless.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec
from .jetnet import NetworkParams, PairedNet, anchored_jet, fd_jet, forward, forward_jet
from .loss import LossProblem, LossWeights
from .problems import get_problem, region_map
from .trainer import sample_band

KINK_MARGIN = 1e-3
JET_STEP = 1e-4
PARAM_STEP = 1e-4
TOLERANCE = 1e-5
LOSS_PROBLEMS = ("ex4_1", "ex4_2", "ex4_3", "ex4_4", "ex4_5", "ex4_8")


@dataclass(frozen=True)
class CheckResult:
    name: str
    instances: int
    rejected: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name}: max relative error {self.max_rel_error:.3e} over {self.instances} instances "
                f"({self.rejected} near-kink draws rejected) {status}")


def pre_activations(params: NetworkParams, x) -> list:
    """Hidden-layer pre-activations for a batch of points."""
    a = np.atleast_2d(np.asarray(x, dtype=float))
    out = []
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ A.T + b
        out.append(z)
        a = np.where(z > 0, z, np.expm1(np.minimum(z, 0))) if params.activation == "elu" else np.maximum(z, 0)
    return out


def near_kink(params: NetworkParams, x, margin: float = KINK_MARGIN) -> bool:
    return any(np.any(np.abs(z) < margin) for z in pre_activations(params, x))


def rel_error(a, b, floor: float = 0.0) -> float:
    """Norm-wise relative error of ``a`` against the reference ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(b), initial=0.0)), floor)
    if scale == 0.0:
        return float(np.max(np.abs(a), initial=0.0))
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def _random_net(rng, dim: int) -> NetworkParams:
    depth = int(rng.integers(1, 4))
    widths = [dim] + [int(rng.integers(2, 8)) for _ in range(depth)] + [1]
    params = NetworkParams.init(widths, rng)
    # nonzero biases so the check does not only see nets through the origin
    return NetworkParams(params.weights, [rng.normal(0, 0.5, b.shape) for b in params.biases], params.activation)


def check_jets(seed: int = 0, instances: int = 100) -> CheckResult:
    """Jet grad/Hessian against central differences of the plain forward pass.

    Odd instances use the anchored ansatz around a random foot point.
    """
    rng = np.random.default_rng(seed)
    worst, rejected, done = 0.0, 0, 0
    while done < instances:
        dim = int(rng.integers(1, 3))
        params = _random_net(rng, dim)
        x = rng.uniform(-1, 1, (1, dim))
        probe = x + JET_STEP * np.array([[s, t] for s in (-1, 0, 1) for t in (-1, 0, 1)])[:, :dim]
        if near_kink(params, probe):
            rejected += 1
            continue
        if done % 2:
            x0 = x + rng.uniform(0.2, 0.5) * _unit(rng, dim)
            g_hat = rng.normal()

            def fn(p, x0=x0, g_hat=g_hat, params=params):
                d = np.linalg.norm(p - x0, axis=1)
                return (d + 1) * g_hat + d * forward(params, p)

            jet = anchored_jet(params, x, x0, g_hat)
        else:
            def fn(p, params=params):
                return forward(params, p)

            jet = forward_jet(params, x)
        ref = fd_jet(fn, x, JET_STEP)
        worst = max(worst, rel_error(jet.grad, ref.grad), rel_error(jet.hess, ref.hess, floor=1e-3))
        done += 1
    return CheckResult("jet derivatives", instances, rejected, worst)


def _unit(rng, dim):
    v = rng.normal(size=(1, dim))
    return v / np.linalg.norm(v)


def _loss_instance(rng):
    name = LOSS_PROBLEMS[int(rng.integers(len(LOSS_PROBLEMS)))]
    problem = get_problem(name)
    if "tau_minus" in problem.params:
        problem = get_problem(name, tau_minus=float(rng.uniform(0.5, 3)), tau_plus=float(rng.uniform(0.5, 3)))
    grid = GridSpec.uniform(problem.bounds, 20)
    rmap = region_map(problem, grid)
    widths = [problem.dim, int(rng.integers(2, 6)), int(rng.integers(2, 6)), 1]
    net = PairedNet.init(widths, rng, shared=problem.shared)
    net = net.with_flat(net.flatten() + rng.normal(0, 0.1, net.size))
    samples = sample_band(rmap, problem, 6, 6, rng)
    return problem, rmap, net, samples


def _sample_points(lp: LossProblem, samples) -> dict:
    pd = lp.pairs
    return {"minus": np.concatenate([samples.interior_minus, pd.minus_x]),
            "plus": np.concatenate([samples.interior_plus, pd.plus_x])}


def check_loss_gradient(seed: int = 0, instances: int = 100) -> CheckResult:
    """Reverse-mode dL/dtheta against fourth-order parameter differences.

    The relative error of each instance is taken norm-wise over the full
    gradient vector, so components many orders below the largest one (whose
    differences are pure cancellation noise) do not dominate.
    """
    rng = np.random.default_rng(seed)
    worst, rejected, done = 0.0, 0, 0
    while done < instances:
        problem, rmap, net, samples = _loss_instance(rng)
        lp = LossProblem.build(problem, rmap)
        pts = _sample_points(lp, samples)
        if any(near_kink(net.side(s), pts[s]) for s in ("minus", "plus")):
            rejected += 1
            continue
        weights = LossWeights(*rng.uniform(0.5, 2.0, 4))
        anchors = lp.batch_anchors(net, samples)
        _, grad = lp.evaluate(net, samples, weights, anchors)
        theta = net.flatten()

        def total(t):
            return lp.evaluate(net.with_flat(t), samples, weights, anchors, gradient=False)[0].total

        fd = np.empty_like(theta)
        h = PARAM_STEP
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (8 * (total(theta + e) - total(theta - e)) - (total(theta + 2 * e) - total(theta - 2 * e))) / (12 * h)
        worst = max(worst, rel_error(grad, fd))
        done += 1
    return CheckResult("loss parameter gradient", instances, rejected, worst)


def run_all(seed: int = 0, instances: int = 100) -> list:
    return [check_jets(seed, instances), check_loss_gradient(seed, instances)]
