from defuse.gradcheck import check_jets, check_loss_gradient, rel_error

import numpy as np


def test_rel_error_floor():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert rel_error(np.array([1e-9]), np.array([0.0]), floor=1e-3) == 1e-6


def test_small_jet_oracle():
    r = check_jets(seed=2, instances=10)
    assert r.passed and r.instances == 10
    assert r.line().startswith(r.name)


def test_small_loss_oracle():
    assert check_loss_gradient(seed=2, instances=4).passed
