"""Adam and gradient clipping against hand-evaluated updates."""

import numpy as np
import pytest

from dialsql.nn import Adam, ContractError, Parameter, clip_global_norm


class TestAdam:
    def test_first_step_hand_evaluated(self):
        # With m = 0.1*g, v = 0.001*g^2 and bias correction at t=1,
        # m_hat = g and v_hat = g^2, so the update is
        # lr * g / (|g| + eps) = lr * sign(g) up to eps.
        p = Parameter("w", [1.0, -2.0])
        p.grad = np.array([0.5, -0.25])
        opt = Adam([p], lr=0.001)
        opt.step()
        expected = np.array([1.0, -2.0]) - 0.001 * np.array([
            0.5 / (0.5 + 1e-8), -0.25 / (0.25 + 1e-8)])
        np.testing.assert_allclose(p.values, expected, atol=1e-15)

    def test_second_step_hand_evaluated(self):
        p = Parameter("w", [0.0])
        opt = Adam([p], lr=0.01)
        g1, g2 = 1.0, 2.0

        p.grad = np.array([g1])
        opt.step()
        p.grad = np.array([g2])
        opt.step()

        m = 0.1 * g1
        v = 0.001 * g1 * g1
        x = -0.01 * (m / (1 - 0.9)) / (np.sqrt(v / (1 - 0.999)) + 1e-8)
        m = 0.9 * m + 0.1 * g2
        v = 0.999 * v + 0.001 * g2 * g2
        x -= 0.01 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        np.testing.assert_allclose(p.values, [x], atol=1e-15)

    def test_descent_on_quadratic(self):
        p = Parameter("w", [5.0])
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            p.grad = 2.0 * p.values
            opt.step()
        assert abs(p.values[0]) < 1e-3

    def test_missing_grad_raises(self):
        p = Parameter("w", [1.0])
        p.grad = None
        with pytest.raises(ContractError):
            Adam([p]).step()

    def test_zero_grad_clears(self):
        p = Parameter("w", [1.0, 2.0])
        p.grad = np.array([3.0, 4.0])
        opt = Adam([p])
        opt.zero_grad()
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])


class TestClipping:
    def test_norm_above_threshold_scaled(self):
        a = Parameter("a", [0.0])
        b = Parameter("b", [0.0])
        a.grad = np.array([3.0])
        b.grad = np.array([4.0])
        norm = clip_global_norm([a, b], 1.0)
        assert norm == pytest.approx(5.0)
        clipped = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
        assert clipped == pytest.approx(1.0)
        # direction preserved
        assert a.grad[0] / b.grad[0] == pytest.approx(3.0 / 4.0)

    def test_norm_below_threshold_untouched(self):
        a = Parameter("a", [0.0])
        a.grad = np.array([0.3])
        norm = clip_global_norm([a], 5.0)
        assert norm == pytest.approx(0.3)
        assert a.grad[0] == 0.3

    def test_zero_gradients_stay_zero(self):
        a = Parameter("a", [0.0, 0.0])
        norm = clip_global_norm([a], 5.0)
        assert norm == 0.0
        np.testing.assert_array_equal(a.grad, [0.0, 0.0])
