"""Band sampling, first-order optimizers and the training loop."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Union

import numpy as np

from .errors import DivergedTraining, EmptyBandSide, NonFiniteLoss, NonFiniteUpdate
from .geometry import RegionMap
from .jetnet import PairedNet, default_widths
from .loss import LossBreakdown, LossProblem, LossWeights, SampleSet, auto_weights, side_values

OPTIMIZERS = ("sgd", "adam")
DIVERGENCE_FACTOR = 1e6
DIVERGENCE_WINDOW = 1000


@dataclass(frozen=True)
class TrainConfig:
    """Training settings; ``None`` fields take dimension-dependent defaults."""

    epochs: Optional[int] = None
    learning_rate: float = 1e-4
    optimizer: Optional[str] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_regen_every: int = 10
    m1: Optional[int] = None
    m2: Optional[int] = None
    seed: int = 0
    weights: Union[str, LossWeights] = "auto"
    widths: Optional[tuple] = None
    activation: str = "elu"

    def __post_init__(self):
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_regen_every < 1:
            raise ValueError("batch_regen_every must be >= 1")
        if self.optimizer is not None and self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if isinstance(self.weights, str) and self.weights != "auto":
            raise ValueError("weights must be 'auto' or LossWeights")

    def resolved(self, dim: int) -> "TrainConfig":
        """Fill the dimension-dependent defaults (SGD in 1D, Adam in 2D)."""
        m = 100 if dim == 1 else 1000
        return replace(
            self,
            epochs=self.epochs or (20000 if dim == 1 else 50000),
            optimizer=self.optimizer or ("sgd" if dim == 1 else "adam"),
            m1=m if self.m1 is None else self.m1,
            m2=m if self.m2 is None else self.m2,
            widths=tuple(self.widths or default_widths(dim)),
        )

    def echo(self) -> str:
        """Plain ``key=value`` lines."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LossWeights):
                v = ",".join(repr(w) for w in v.as_tuple())
            elif isinstance(v, tuple):
                v = ",".join(str(t) for t in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def sample_band(rmap: RegionMap, problem, m1: int, m2: int, rng, seed: int = 0) -> SampleSet:
    """Uniform points in the band on each side by rejection over band cells."""
    grid = rmap.grid
    cells = np.argwhere(rmap.band_cells)
    lo = np.array([b[0] for b in grid.bounds])
    h = np.array(grid.h)
    out = {}
    for side, m in (("minus", m1), ("plus", m2)):
        got, have = [], 0
        misses = 0
        while have < m:
            if len(cells) == 0 or misses > 200:
                raise EmptyBandSide(f"the band has no {side} side on grid {grid.counts}")
            batch = max(64, 2 * (m - have))
            pick = cells[rng.integers(0, len(cells), size=batch)]
            pts = lo + (pick + rng.random((batch, grid.dim))) * h
            ph = problem.phi.phi(pts)
            keep = pts[ph < 0] if side == "minus" else pts[ph > 0]
            misses = misses + 1 if len(keep) == 0 else 0
            got.append(keep)
            have += len(keep)
        out[side] = np.concatenate(got)[:m] if m > 0 else np.zeros((0, grid.dim))
    return SampleSet(out["minus"], out["plus"], list(rmap.node_pairs), seed)


def step(theta, grad, state: dict, config: TrainConfig):
    """One optimizer update; returns ``(theta, state)``.

    ``state`` holds the Adam moments and step counter; it is copied, not
    modified.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        raise ValueError(f"parameter shape {theta.shape} does not match gradient shape {grad.shape}")
    lr = config.learning_rate
    opt = config.optimizer or "sgd"
    if opt == "sgd":
        new, state = theta - lr * grad, dict(state)
    else:
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        t = state.get("t", 0) + 1
        m = b1 * state.get("m", np.zeros_like(theta)) + (1 - b1) * grad
        v = b2 * state.get("v", np.zeros_like(theta)) + (1 - b2) * grad * grad
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new = theta - lr * mhat / (np.sqrt(vhat) + eps)
        state = {"t": t, "m": m, "v": v}
    if not np.all(np.isfinite(new)):
        raise NonFiniteUpdate("optimizer produced a non-finite parameter", state.get("t"))
    return new, state


@dataclass
class TrainedNet:
    net: PairedNet
    problem: object
    loss_history: list
    config: TrainConfig
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def final_total(self) -> float:
        return self.loss_history[-1].total if self.loss_history else float("nan")

    def evaluate(self, side: str, points) -> np.ndarray:
        return side_values(self.problem, self.net, side, points)


def _active_terms(problem, net: PairedNet, rmap: RegionMap) -> tuple:
    has_pairs = len(rmap.node_pairs) > 0
    return (True, True, has_pairs and not net.shared, has_pairs)


def train(problem, rmap: RegionMap, config: TrainConfig = TrainConfig(),
          callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> TrainedNet:
    """Fit the band networks; the whole run is a function of ``config.seed``."""
    cfg = config.resolved(problem.dim)
    init_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    net = PairedNet.init(list(cfg.widths), np.random.default_rng(init_seq), shared=problem.shared,
                         activation=cfg.activation)
    sample_rng = np.random.default_rng(sample_seq)
    lp = LossProblem.build(problem, rmap)

    samples = anchors = None
    weights = cfg.weights if isinstance(cfg.weights, LossWeights) else None
    theta = net.flatten()
    state: dict = {}
    history = []
    for it in range(cfg.epochs):
        if it % cfg.batch_regen_every == 0:
            samples = sample_band(rmap, problem, cfg.m1, cfg.m2, sample_rng, cfg.seed)
            anchors = lp.batch_anchors(net, samples)
        if weights is None:
            terms = lp.terms(net, samples, anchors)
            weights = auto_weights(terms, _active_terms(problem, net, rmap))
        try:
            breakdown, grad = lp.evaluate(net, samples, weights, anchors)
            theta, state = step(theta, grad, state, cfg)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"step {it}: {exc}", exc.index) from exc
        except NonFiniteUpdate as exc:
            raise NonFiniteUpdate(f"step {it}: {exc}", it) from exc
        net = net.with_flat(theta)
        history.append(breakdown)
        if callback is not None:
            callback(it, breakdown)
        if it >= 1 and it % 100 == 0:
            window = [b.total for b in history[-DIVERGENCE_WINDOW:]]
            if breakdown.total > DIVERGENCE_FACTOR * min(window):
                raise DivergedTraining(f"total loss grew more than {DIVERGENCE_FACTOR:g}x within {DIVERGENCE_WINDOW} steps (step {it})")
    return TrainedNet(net, problem, history, cfg, weights)
