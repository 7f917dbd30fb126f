import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defuse.errors import EmptyBandSide, NonFiniteUpdate
from defuse.geometry import GridSpec
from defuse.loss import LossWeights, history_csv
from defuse.problems import get_problem, region_map
from defuse.trainer import TrainConfig, sample_band, step, train


def test_sgd_example():
    new, _ = step(np.array([1.0, 2.0]), np.array([1.0, -1.0]), {}, TrainConfig(learning_rate=0.1, optimizer="sgd"))
    np.testing.assert_allclose(new, [0.9, 2.1])


def test_adam_first_step_moves_by_learning_rate():
    cfg = TrainConfig(learning_rate=1e-3, optimizer="adam")
    new, state = step(np.zeros(3), np.array([1.0, -4.0, 0.5]), {}, cfg)
    np.testing.assert_allclose(new, [-1e-3, 1e-3, -1e-3], rtol=1e-6)
    assert state["t"] == 1


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_zero_gradient_leaves_parameters(opt):
    theta = np.array([0.3, -1.2])
    new, _ = step(theta, np.zeros(2), {}, TrainConfig(optimizer=opt))
    np.testing.assert_array_equal(new, theta)


def test_non_finite_update():
    with pytest.raises(NonFiniteUpdate):
        step(np.array([1.0]), np.array([np.inf]), {}, TrainConfig(optimizer="sgd"))


def test_step_does_not_mutate_state():
    cfg = TrainConfig(optimizer="adam")
    _, s1 = step(np.zeros(2), np.ones(2), {}, cfg)
    snapshot = {k: np.copy(v) for k, v in s1.items()}
    step(np.zeros(2), np.ones(2), s1, cfg)
    for k, v in snapshot.items():
        np.testing.assert_array_equal(s1[k], v)


def test_config_validation_and_defaults():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    c1, c2 = TrainConfig().resolved(1), TrainConfig().resolved(2)
    assert (c1.optimizer, c1.epochs, c1.m1) == ("sgd", 20000, 100)
    assert (c2.optimizer, c2.epochs, c2.m1) == ("adam", 50000, 1000)


def test_config_echo():
    text = TrainConfig(epochs=7, weights=LossWeights(1, 2, 3, 4)).echo()
    assert "epochs=7" in text.splitlines()
    assert "weights=1,2,3,4" in text.splitlines()


def _ex(name="ex4_1", n=20):
    p = get_problem(name)
    return p, region_map(p, GridSpec.uniform(p.bounds, n))


def test_one_epoch_gives_one_history_entry():
    p, rmap = _ex()
    t = train(p, rmap, TrainConfig(epochs=1))
    assert len(t.loss_history) == 1
    assert np.isfinite(t.final_total)


def test_training_is_deterministic():
    p, rmap = _ex("ex4_3")
    cfg = TrainConfig(epochs=5, m1=30, m2=30, seed=4)
    a, b = train(p, rmap, cfg), train(p, rmap, cfg)
    assert history_csv(a.loss_history) == history_csv(b.loss_history)
    assert np.array_equal(a.net.flatten(), b.net.flatten())
    c = train(p, rmap, TrainConfig(epochs=5, m1=30, m2=30, seed=5))
    assert not np.array_equal(a.net.flatten(), c.net.flatten())


def test_1d_sample_counts():
    p, rmap = _ex()
    s = sample_band(rmap, p, 100, 100, np.random.default_rng(0))
    assert s.interior_minus.shape == (100, 1) and s.interior_plus.shape == (100, 1)
    assert len(s.pairs) == 1


def test_sampling_side_without_band_raises():
    p, rmap = _ex()
    empty = type(rmap)(rmap.grid, rmap.labels, np.zeros_like(rmap.band_cells), rmap.band_width_cells,
                       rmap.node_pairs, rmap.phi_nodes)
    with pytest.raises(EmptyBandSide):
        sample_band(empty, p, 5, 5, np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["ex4_3", "ex4_4", "ex4_8"]), st.integers(0, 10_000))
def test_samples_lie_in_band_cells_on_their_side(name, seed):
    p = get_problem(name)
    rmap = region_map(p, GridSpec.uniform(p.bounds, 40))
    s = sample_band(rmap, p, 50, 50, np.random.default_rng(seed))
    assert np.all(p.phi.phi(s.interior_minus) < 0)
    assert np.all(p.phi.phi(s.interior_plus) > 0)
    lo = np.array([b[0] for b in rmap.grid.bounds])
    for pts in (s.interior_minus, s.interior_plus):
        cell = np.floor((pts - lo) / np.array(rmap.grid.h)).astype(int)
        assert rmap.band_cells[tuple(cell.T)].all()
