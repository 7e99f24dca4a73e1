"""Adam optimizer unit tests against the closed-form first-step update."""

import numpy as np
import pytest

from voxinst.autodiff import Tensor
from voxinst.errors import ShapeError
from voxinst.optim import AdamState, adam_step


def test_first_step_magnitude_is_lr():
    p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    state = AdamState(lr=0.001)
    adam_step(state, {"p": p}, {"p": np.ones(3)})
    # m-hat = v-hat = 1 after one step, so the update is -lr/(1 + eps).
    np.testing.assert_allclose(p.data, -0.001 / (1 + 1e-8), rtol=1e-12)


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.arange(4, dtype=np.float64), requires_grad=True)
    before = p.data.copy()
    adam_step(AdamState(), {"p": p}, {"p": np.zeros(4)})
    np.testing.assert_array_equal(p.data, before)


def test_equal_histories_update_identically():
    rng = np.random.default_rng(3)
    a = Tensor(np.full(5, 0.7), requires_grad=True)
    b = Tensor(np.full(5, 0.7), requires_grad=True)
    state = AdamState(lr=1e-3)
    for _ in range(10):
        g = rng.standard_normal(5)
        adam_step(state, {"a": a, "b": b}, {"a": g, "b": g.copy()})
    np.testing.assert_array_equal(a.data, b.data)


def test_matches_textbook_recurrence():
    rng = np.random.default_rng(11)
    p = Tensor(np.zeros(6, dtype=np.float64), requires_grad=True)
    state = AdamState(lr=5e-4)
    m = v = np.zeros(6)
    theta = np.zeros(6)
    for t in range(1, 8):
        g = rng.standard_normal(6)
        adam_step(state, {"p": p}, {"p": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 5e-4 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, theta, rtol=1e-12)


def test_missing_grad_skipped_and_shape_mismatch_raises():
    p = Tensor(np.zeros(3), requires_grad=True)
    q = Tensor(np.ones(2), requires_grad=True)
    adam_step(AdamState(), {"p": p, "q": q}, {"p": np.ones(3)})
    np.testing.assert_array_equal(q.data, np.ones(2))
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"p": p}, {"p": np.ones(4)})
