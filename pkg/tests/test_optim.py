"""Adam update behaviour: bias correction, symmetry, shape checks."""

import numpy as np
import pytest

from skelattack.optim import AdamState, adam_update, init_adam


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.zeros(3)}
    new_params, state = adam_update(params, grads)
    assert np.array_equal(new_params["w"], params["w"])
    assert state.step == 1


def test_first_step_is_bias_corrected():
    # constant unit gradient: m_hat = 1, v_hat = 1, so the step is ~lr
    params = {"w": np.array([0.5])}
    grads = {"w": np.array([1.0])}
    new_params, _ = adam_update(params, grads, lr=0.1)
    delta = float(new_params["w"][0] - 0.5)
    assert delta == pytest.approx(-0.1, abs=1e-6)


def test_identical_params_stay_identical():
    params = {"a": np.array([0.3, -0.7]), "b": np.array([0.3, -0.7])}
    state = None
    rng = np.random.default_rng(4)
    for _ in range(25):
        g = rng.normal(size=2)
        grads = {"a": g.copy(), "b": g.copy()}
        params, state = adam_update(params, grads, state, lr=0.05)
        assert np.array_equal(params["a"], params["b"])


def test_shape_mismatch_rejected():
    params = {"w": np.zeros(3)}
    with pytest.raises(ValueError, match="shape mismatch"):
        adam_update(params, {"w": np.zeros(4)})


def test_key_mismatch_rejected():
    with pytest.raises(ValueError, match="share keys"):
        adam_update({"w": np.zeros(2)}, {"v": np.zeros(2)})


def test_matches_reference_implementation():
    # independent elementwise reference, run for several steps
    rng = np.random.default_rng(11)
    p = rng.normal(size=(4,))
    params = {"w": p.copy()}
    state = None
    m = np.zeros(4)
    v = np.zeros(4)
    ref = p.copy()
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    for t in range(1, 8):
        g = rng.normal(size=4)
        params, state = adam_update(params, {"w": g}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert np.allclose(params["w"], ref, rtol=0, atol=1e-15)


def test_init_state_shapes():
    params = {"a": np.zeros((2, 3)), "b": np.zeros(5)}
    state = init_adam(params)
    assert isinstance(state, AdamState)
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (5,)
    assert state.step == 0
