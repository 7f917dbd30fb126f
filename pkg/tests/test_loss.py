import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defuse.errors import NonFiniteLoss
from defuse.geometry import GridSpec
from defuse.gradcheck import check_loss_gradient
from defuse.jetnet import Jet, PairedNet
from defuse.loss import (
    LossProblem, LossWeights, PairData, SampleSet, auto_weights, history_csv, interior_loss, jump_losses,
    jump_terms, pair_data, pde_residual, total_loss,
)
from defuse.problems import get_problem, region_map
from defuse.trainer import sample_band


class Stub:
    """Minimal problem: callables for beta and f on both sides."""

    def __init__(self, beta, f):
        self._beta, self._f = beta, f

    def beta(self, side, x):
        return self._beta(np.atleast_2d(x))

    def f(self, side, x, u):
        return self._f(np.atleast_2d(x), u)

    def df_du(self, side, x, u):
        return np.zeros(len(np.atleast_2d(x)))


def jet1(value, grad, hess):
    return Jet(np.array([value], float), np.array([grad], float), np.array([hess], float))


def test_total_loss_examples():
    assert total_loss(LossWeights(), 1, 2, 3, 4).total == 10
    assert total_loss(LossWeights(2, 0.5, 1, 1), 1, 2, 0, 0).total == 3
    assert total_loss(LossWeights(3, 4, 5, 6), 0, 0, 0, 0).total == 0
    with pytest.raises(NonFiniteLoss):
        total_loss(LossWeights(), np.nan, 0, 0, 0)


def test_weights_must_be_positive():
    with pytest.raises(ValueError):
        LossWeights(0, 1, 1, 1)
    with pytest.raises(ValueError):
        LossWeights(1, np.inf, 1, 1)


def test_auto_weights_examples():
    w = auto_weights((1e12, 1, 1, 1e6)).as_tuple()
    np.testing.assert_allclose(w, (1e-12, 1, 1, 1e-6))
    assert auto_weights((3, 3, 3, 3)).as_tuple() == (1, 1, 1, 1)
    w = auto_weights((0.0, 1.0, 2.0, 4.0)).as_tuple()
    assert w[0] == 1.0
    np.testing.assert_allclose(w[1:], (1e-12, 5e-13, 2.5e-13))


def test_auto_weights_skip_inactive_terms():
    w = auto_weights((4.0, 2.0, 0.0, 1.0), active=(True, True, False, True)).as_tuple()
    np.testing.assert_allclose(w, (0.25, 0.5, 1.0, 1.0))


def test_residual_of_paraboloid():
    stub = Stub(lambda x: (np.ones(len(x)), np.zeros_like(x)), lambda x, u: np.full(len(x), -4.0))
    jet = jet1(123.0, [0.6, -0.2], [[2, 0], [0, 2]])
    assert pde_residual(stub, "minus", np.array([[0.3, -0.1]]), jet)[0] == 0.0


def test_residual_hand_chain_rule():
    stub = Stub(lambda x: (x[:, 0], np.tile([1.0, 0.0], (len(x), 1))), lambda x, u: np.zeros(len(x)))
    jet = jet1(0.0, [2.0, 0.0], [[0, 0], [0, 0]])
    assert pde_residual(stub, "plus", np.array([[0.4, 0.9]]), jet)[0] == -2.0


def test_ex4_4_exact_jet_has_zero_residual():
    p = get_problem("ex4_4", tau_minus=1e3, tau_plus=1.0)
    rng = np.random.default_rng(0)
    r = 0.45 * np.sqrt(rng.random(50))
    t = rng.uniform(0, 2 * np.pi, 50)
    x = np.c_[r * np.cos(t), r * np.sin(t)]
    res = pde_residual(p, "minus", x, p.exact("minus", x))
    assert np.max(np.abs(res)) < 1e-10


def test_interior_loss_single_point_is_residual_squared():
    p = get_problem("ex4_3")
    net = PairedNet.init([2, 3, 1], np.random.default_rng(0))
    x = np.array([[0.1, 0.2]])
    value, (ev, *_rest) = interior_loss(p, net, "minus", x)
    r = pde_residual(p, "minus", x, ev.jet)[0]
    assert value == pytest.approx(r * r, rel=1e-14)


def test_ex4_2_pair_targets():
    p = get_problem("ex4_2", tau_minus=1.0, tau_plus=1.0)
    rmap = region_map(p, GridSpec.uniform(p.bounds, 20))
    pd = pair_data(p, rmap.grid, rmap.node_pairs)
    np.testing.assert_allclose(pd.v, 7 / 6)
    np.testing.assert_allclose(pd.w, 5.0)


def test_value_jump_with_matching_offset_is_zero():
    pd = PairData(np.array([[0.9]]), np.array([[1.1]]), np.array([[1.0]]), np.array([5.0]), np.array([0.0]))
    stub = Stub(lambda x: (np.ones(len(x)), np.zeros_like(x)), None)
    j3, j4, _, _ = jump_terms(stub, jet1(0.0, [0.0], [[0.0]]), jet1(5.0, [0.0], [[0.0]]), pd)
    assert j3[0] == 0.0 and j4[0] == 0.0


def test_shared_network_has_no_value_jump():
    p = get_problem("ex4_4", tau_minus=1.0, tau_plus=1.0)
    rmap = region_map(p, GridSpec.uniform(p.bounds, 20))
    net = PairedNet.init([2, 4, 1], np.random.default_rng(1), shared=True)
    l3, l4, _ = jump_losses(p, net, rmap.node_pairs, rmap.grid)
    assert l3 == 0.0 and l4 >= 0.0


def _setup(name="ex4_3", seed=0, **kw):
    p = get_problem(name, **kw)
    rmap = region_map(p, GridSpec.uniform(p.bounds, 20))
    rng = np.random.default_rng(seed)
    net = PairedNet.init([p.dim, 4, 4, 1], rng, shared=p.shared)
    samples = sample_band(rmap, p, 20, 20, rng)
    return p, rmap, net, samples


def test_scaling_beta_scales_residual_and_flux_terms():
    c = 7.0
    p1, rmap, net, samples = _setup(tau_minus=1.0, tau_plus=1.0)
    pc = get_problem("ex4_3", tau_minus=c, tau_plus=c)
    t1 = LossProblem.build(p1, rmap).terms(net, samples)
    tc = LossProblem.build(pc, rmap).terms(net, samples)
    np.testing.assert_allclose(tc[0], c * c * t1[0], rtol=1e-10)
    np.testing.assert_allclose(tc[1], c * c * t1[1], rtol=1e-10)
    np.testing.assert_allclose(tc[2], t1[2], rtol=1e-12)
    np.testing.assert_allclose(tc[3], c * c * t1[3], rtol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_terms_invariant_under_sample_permutation(seed):
    p, rmap, net, samples = _setup(seed=seed % 7)
    rng = np.random.default_rng(seed)
    perm = SampleSet(samples.interior_minus[rng.permutation(20)], samples.interior_plus[rng.permutation(20)],
                     samples.pairs)
    lp = LossProblem.build(p, rmap)
    np.testing.assert_allclose(lp.terms(net, perm), lp.terms(net, samples), rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_total_is_linear_in_weights(a, b, c, d):
    p, rmap, net, samples = _setup()
    lp = LossProblem.build(p, rmap)
    terms = lp.terms(net, samples)
    total = lp.evaluate(net, samples, LossWeights(a, b, c, d), gradient=False)[0].total
    assert total == pytest.approx(a * terms[0] + b * terms[1] + c * terms[2] + d * terms[3], rel=1e-12)


def test_gradient_of_sum_is_sum_of_gradients():
    p, rmap, net, samples = _setup()
    lp = LossProblem.build(p, rmap)
    g_all = lp.evaluate(net, samples, LossWeights(1, 2, 3, 4))[1]
    parts = [lp.evaluate(net, samples, LossWeights(*[(1, 2, 3, 4)[i] if i == k else 1e-300 for i in range(4)]))[1]
             for k in range(4)]
    np.testing.assert_allclose(sum(parts), g_all, rtol=1e-12, atol=1e-13 * np.max(np.abs(g_all)))


def test_loss_gradient_oracle_small():
    assert check_loss_gradient(seed=11, instances=5).passed


def test_history_csv_header():
    text = history_csv([total_loss(LossWeights(), 1, 2, 3, 4)])
    assert text.splitlines() == ["step,l1,l2,l3,l4,total", "0,1,2,3,4,10"]
