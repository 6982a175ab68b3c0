"""Adam optimizer contracts: no-op on zero gradients, the closed-form first
step, determinism, and shape policing."""

import numpy as np
import pytest

from antitransfer.layers import ShapeError
from antitransfer.optim import Adam


def test_zero_gradients_leave_parameters_unchanged():
    adam = Adam(lr=0.0005)
    p = np.array([1.0, -2.0, 3.0])
    before = p.copy()
    for _ in range(25):
        adam.step({"p": p}, {"p": np.zeros(3)})
    assert np.array_equal(p, before)


def test_first_step_is_bias_corrected_unit_update():
    """Constant gradient 1: after step one, the parameter moves by ~lr."""
    lr = 0.0005
    adam = Adam(lr=lr)
    p = np.array([0.25])
    adam.step({"p": p}, {"p": np.array([1.0])})
    # m_hat = v_hat = 1 after bias correction, so the update is lr/(1 + eps)
    expected = 0.25 - lr / (1.0 + adam.eps)
    assert abs(p[0] - expected) < 1e-15
    assert adam.t == 1


def test_two_runs_same_inputs_are_bitwise_identical():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(5) for _ in range(10)]
    outs = []
    for _ in range(2):
        adam = Adam(lr=1e-3)
        p = np.linspace(-1, 1, 5)
        for g in grads:
            adam.step({"p": p}, {"p": g})
        outs.append(p.copy())
    assert np.array_equal(outs[0], outs[1])


def test_step_counter_strictly_increases():
    adam = Adam()
    p = np.zeros(2)
    seen = []
    for _ in range(4):
        adam.step({"p": p}, {"p": np.ones(2)})
        seen.append(adam.t)
    assert seen == [1, 2, 3, 4]


def test_shape_mismatch_raises():
    adam = Adam()
    with pytest.raises(ShapeError):
        adam.step({"p": np.zeros(3)}, {"p": np.zeros(4)})


def test_moments_match_parameter_shapes():
    adam = Adam()
    p = np.zeros((2, 3))
    adam.step({"p": p}, {"p": np.ones((2, 3))})
    assert adam.m["p"].shape == (2, 3)
    assert adam.v["p"].shape == (2, 3)
