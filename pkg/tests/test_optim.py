"""
Tests for the Adam optimizer and the gradient checker.
"""

import logging

import numpy as np
import pytest

from firecast.exceptions import NonFiniteGradientError
from firecast.layers import BatchNorm2d, Linear
from firecast.optim import Adam, AdamState, GradcheckReport, adam_step, gradcheck, relative_error


class ScaledWeightGrad(Linear):
    """Linear layer whose weight gradient is deliberately 10% too large."""

    def backward(self, dout, cache):
        dx = super().backward(dout, cache)
        self.weight.grad *= 1.1
        return dx


class TestAdamStep:
    """Test cases for the functional Adam update."""

    def test_zero_gradient_is_a_no_op(self):
        """Test that zero gradients leave parameters unchanged."""
        param = np.array([1.0, -2.0, 3.0])
        state = AdamState.zeros_like([param])
        adam_step([param], [np.zeros(3)], state, lr=0.1)
        assert param.tolist() == [1.0, -2.0, 3.0]
        assert state.step == 1

    def test_first_step_moves_by_lr(self):
        """Test that the first bias-corrected step is lr times the gradient sign."""
        param = np.zeros(4)
        grad = np.array([0.5, -3.0, 1e-3, -1e3])
        adam_step([param], [grad], AdamState.zeros_like([param]), lr=0.01)
        assert np.allclose(param, -0.01 * np.sign(grad), rtol=1e-4)

    def test_two_steps_by_hand(self):
        """Test two updates against the recursion written out."""
        param = np.array([1.0])
        state = AdamState.zeros_like([param])
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8

        expected = 1.0
        m = v = 0.0
        for t, g in enumerate([1.0, 2.0], start=1):
            adam_step([param], [np.array([g])], state, lr=lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert param[0] == pytest.approx(expected, rel=1e-12)
        assert state.m[0][0] == pytest.approx(0.29)
        assert state.v[0][0] == pytest.approx(0.004999)

    def test_zero_learning_rate(self):
        """Test that lr = 0 keeps parameters fixed while moments advance."""
        param = np.array([0.25, 0.5])
        state = AdamState.zeros_like([param])
        adam_step([param], [np.array([1.0, -1.0])], state, lr=0.0)
        assert param.tolist() == [0.25, 0.5]
        assert state.m[0].any()

    def test_non_finite_gradient_touches_nothing(self):
        """Test that a NaN gradient raises before any parameter changes."""
        first = np.array([1.0, 2.0])
        second = np.array([3.0])
        state = AdamState.zeros_like([first, second])

        with pytest.raises(NonFiniteGradientError, match="decoder.bias"):
            adam_step([first, second], [np.array([1.0, 1.0]), np.array([np.nan])], state,
                      lr=0.1, names=["decoder.weight", "decoder.bias"])

        assert first.tolist() == [1.0, 2.0]
        assert second.tolist() == [3.0]
        assert state.step == 0
        assert not state.m[0].any()

    def test_infinite_gradient_without_names(self):
        """Test that unnamed tensors are reported by index."""
        param = np.zeros(1)
        with pytest.raises(NonFiniteGradientError, match="#0"):
            adam_step([param], [np.array([np.inf])], AdamState.zeros_like([param]), lr=0.1)


class TestAdam:
    """Test cases for the Adam wrapper over named parameters."""

    def test_step_updates_parameters(self):
        """Test that a step moves weights against their gradient."""
        layer = Linear(3, 2, dtype=np.float64)
        before = layer.weight.data.copy()
        optimizer = Adam(layer.named_parameters(), lr=0.1)
        layer.weight.grad[...] = 1.0
        optimizer.step()

        assert np.allclose(layer.weight.data, before - 0.1, atol=1e-6)
        assert layer.bias.data.tolist() == [0.0, 0.0]
        assert optimizer.names == ["weight", "bias"]

    def test_zero_grad(self):
        """Test that zero_grad clears every parameter gradient."""
        layer = Linear(2, 2)
        optimizer = Adam(layer.named_parameters())
        layer.weight.grad[...] = 5.0
        optimizer.zero_grad()
        assert not layer.weight.grad.any()

    def test_buffers_are_not_optimized(self):
        """Test that running statistics stay out of the parameter list."""
        norm = BatchNorm2d(2)
        optimizer = Adam(norm.named_parameters(), lr=1.0)
        norm.weight.grad[...] = 1.0
        norm.bias.grad[...] = 1.0
        optimizer.step()

        assert optimizer.names == ["weight", "bias"]
        assert norm.running_mean.tolist() == [0.0, 0.0]
        assert norm.running_var.tolist() == [1.0, 1.0]


class TestGradcheck:
    """Test cases for the finite-difference gradient checker."""

    def test_linear_passes(self):
        """Test that a correct dense layer checks out tightly."""
        rng = np.random.default_rng(0)
        layer = Linear(5, 3, rng=rng, dtype=np.float64)
        layer.bias.data = rng.standard_normal(3)
        report = gradcheck(layer, [rng.standard_normal((4, 5))])

        assert report.max_rel_error < 1e-6
        assert report.passed
        assert report.checked == 15 + 3 + 20
        assert set(report.errors) == {"weight", "bias", "input.0"}

    def test_corrupted_backward_fails(self):
        """Test that a wrong weight gradient is caught and named."""
        rng = np.random.default_rng(1)
        layer = ScaledWeightGrad(4, 3, rng=rng, dtype=np.float64)
        report = gradcheck(layer, [rng.standard_normal((2, 4))])

        assert not report.passed
        assert report.worst() == "weight"
        assert report.errors["bias"] < 1e-6

    def test_sampling_limits_checks(self):
        """Test that max_checks bounds the entries per tensor."""
        rng = np.random.default_rng(2)
        layer = Linear(10, 10, rng=rng, dtype=np.float64)
        report = gradcheck(layer, [rng.standard_normal((3, 10))], max_checks=4)
        assert report.checked == 4 * 3

    def test_buffers_restored(self):
        """Test that repeated train-mode evaluations leave running statistics untouched."""
        rng = np.random.default_rng(3)
        norm = BatchNorm2d(2, dtype=np.float64)
        gradcheck(norm, [rng.standard_normal((3, 2, 2, 2))])
        assert norm.running_mean.tolist() == [0.0, 0.0]
        assert norm.running_var.tolist() == [1.0, 1.0]

    def test_warns_below_float64(self, caplog):
        """Test the precision warning for float32 modules."""
        layer = Linear(2, 2)
        with caplog.at_level(logging.WARNING, logger="firecast.optim"):
            gradcheck(layer, [np.ones((1, 2), dtype=np.float32)], tolerance=1e-2)
        assert "64-bit" in caplog.text

    def test_relative_error_floor(self):
        """Test that tiny gradients are compared against the floor."""
        assert relative_error(0.0, 1e-6) == pytest.approx(1e-2)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)
        assert relative_error(1.0, 1.0) == 0.0

    def test_empty_report(self):
        """Test a report with nothing checked."""
        report = GradcheckReport(max_rel_error=0.0, tolerance=1e-5)
        assert report.worst() is None
        assert report.passed
