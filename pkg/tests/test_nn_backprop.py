"""
Unit Tests for the Reverse-Mode Substrate
=========================================
Layer semantics, finite-difference gradient checks, SGD and checkpoints.

Run with: pytest tests/test_nn_backprop.py -v
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.nn_backprop import (
    SGD,
    BackwardBeforeForwardError,
    Conv1D,
    Dense,
    Network,
    NonFiniteError,
    ReLU,
    ShapeError,
    Tensor,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


# ============================================================================
# Layer Tests
# ============================================================================


class TestLayers:
    """Test suite for forward semantics of each layer kind."""

    def test_identity_dense(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(forward(Network([Dense.identity(3)]), x), x)

    def test_relu_negative_input(self):
        out = forward(Network([ReLU()]), -np.arange(1.0, 7.0).reshape(2, 3))
        np.testing.assert_array_equal(out, 0.0)

    def test_unit_kernel_conv_is_identity(self):
        conv = Conv1D(2, 2, 1, padding=0)
        conv.weight.values[...] = np.eye(2)[:, :, None]
        x = np.random.default_rng(1).normal(size=(4, 2, 7))
        np.testing.assert_allclose(forward(Network([conv]), x), x)

    def test_conv_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        conv = Conv1D(2, 3, 3, rng=rng)
        x = rng.normal(size=(1, 2, 6))
        out = conv.forward(x)
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        expected = np.zeros((1, 3, 6))
        for o in range(3):
            for w in range(6):
                expected[0, o, w] = np.sum(conv.weight.values[o] * padded[0, :, w : w + 3]) + conv.bias.values[o]
        np.testing.assert_allclose(out, expected)

    def test_conv_output_width_with_stride(self):
        conv = Conv1D(1, 1, 3, stride=2, padding=0)
        assert conv.forward(np.zeros((1, 1, 9))).shape == (1, 1, 4)
        assert conv.output_width(9) == 4

    def test_shape_error_names_layer(self):
        net = Network([Dense(4, 3), ReLU(), Dense(5, 2)])
        with pytest.raises(ShapeError, match="layer 2"):
            net.forward(np.zeros((1, 4)))

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            Network([Dense(2, 2)]).forward(np.array([[np.nan, 1.0]]))

    def test_backward_before_forward(self):
        with pytest.raises(BackwardBeforeForwardError):
            backward(Network([Dense(2, 2)]))


# ============================================================================
# Gradient Tests
# ============================================================================


class TestGradients:
    """Test suite for backward against central finite differences."""

    def test_sum_through_identity(self):
        net = Network([Dense.identity(4)])
        net.forward(np.ones((3, 4)))
        grad_in, _ = backward(net)
        np.testing.assert_array_equal(grad_in, np.ones((3, 4)))

    def test_zero_loss_zero_gradients(self):
        net = _two_layer(np.random.default_rng(3))
        out = net.forward(np.random.default_rng(4).normal(size=(2, 4)))
        grad_in, grads = backward(net, np.zeros_like(out))
        assert not grad_in.any()
        assert all(not g.any() for g in grads)

    @pytest.mark.parametrize("seed", range(3))
    def test_dense_relu_network(self, seed):
        rng = np.random.default_rng(seed)
        net = _two_layer(rng)
        _check_gradients(net, rng.normal(size=(3, 4)), rng)

    @pytest.mark.parametrize("kernel, stride", [(3, 1), (1, 1), (3, 2), (5, 1)])
    def test_conv_layer(self, kernel, stride):
        rng = np.random.default_rng(kernel * 10 + stride)
        net = Network([Conv1D(2, 3, kernel, stride=stride, rng=rng)])
        _check_gradients(net, rng.normal(size=(2, 2, 9)), rng)

    def test_encoder_shaped_network(self):
        """conv -> relu -> conv -> relu -> dense, as used by the VAE encoder."""
        rng = np.random.default_rng(7)
        c1, c2 = Conv1D(2, 4, 3, rng=rng), Conv1D(4, 4, 3, rng=rng)
        net = Network([c1, ReLU(), c2, ReLU(), Dense(4 * 8, 5, rng), ReLU(), Dense(5, 4, rng)])
        _check_gradients(net, rng.normal(size=(3, 2, 8)), rng)

    @pytest.mark.parametrize("seed", range(4))
    def test_random_shapes(self, seed):
        rng = np.random.default_rng(100 + seed)
        d_in, hidden, d_out, batch = rng.integers(1, 6, size=4)
        net = Network([Dense(d_in, hidden, rng), ReLU(), Dense(hidden, d_out, rng)])
        _check_gradients(net, rng.normal(size=(batch, d_in)), rng)

    def test_gradients_accumulate_until_zeroed(self):
        rng = np.random.default_rng(8)
        net = _two_layer(rng)
        x = rng.normal(size=(2, 4))
        net.forward(x)
        _, once = backward(net)
        net.forward(x)
        _, twice = backward(net)
        np.testing.assert_allclose(twice[0], 2 * once[0])
        net.zero_grad()
        assert not net.parameters()[0].grad.any()


# ============================================================================
# Optimizer Tests
# ============================================================================


class TestSGD:
    """Test suite for parameter updates."""

    def test_zero_learning_rate(self):
        params = [np.array([1.0, 2.0])]
        np.testing.assert_array_equal(sgd_step(params, [np.array([5.0, 5.0])], 0.0)[0], params[0])

    def test_single_update(self):
        assert sgd_step([np.array(1.0)], [np.array(2.0)], 0.1)[0] == pytest.approx(0.8)

    def test_two_half_steps_equal_one_step(self):
        p, g = [np.array([0.3, -1.2])], [np.array([2.0, 0.5])]
        half = sgd_step(sgd_step(p, g, 0.05), g, 0.05)
        np.testing.assert_allclose(half[0], sgd_step(p, g, 0.1)[0])

    def test_step_does_not_mutate_inputs(self):
        p = np.array([1.0])
        sgd_step([p], [np.array([1.0])], 0.5)
        assert p[0] == 1.0

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            sgd_step([np.zeros(2)], [], 0.1)

    def test_momentum(self):
        t = Tensor(np.array([0.0]))
        opt = SGD([t], lr=1.0, momentum=0.5)
        t.grad[...] = 1.0
        opt.step()
        opt.step()
        assert t.values[0] == pytest.approx(-(1.0 + 1.5))

    def test_clipping(self):
        t = Tensor(np.array([0.0, 0.0]))
        opt = SGD([t], lr=1.0, clip_norm=1.0)
        t.grad[...] = [3.0, 4.0]
        opt.step()
        np.testing.assert_allclose(t.values, [-0.6, -0.8])


# ============================================================================
# Checkpoint Tests
# ============================================================================


class TestCheckpoints:
    """Test suite for npz checkpoints."""

    def test_state_restored(self, tmp_path):
        rng = np.random.default_rng(9)
        net = _two_layer(rng)
        save_checkpoint(str(tmp_path / "m.npz"), net.state_dict(), {"note": "x"})
        arrays, meta = load_checkpoint(str(tmp_path / "m.npz"))
        other = _two_layer(np.random.default_rng(10))
        other.load_state_dict(arrays)
        x = rng.normal(size=(2, 4))
        np.testing.assert_array_equal(other.forward(x), net.forward(x))
        assert meta == {"note": "x"}

    def test_shape_mismatch(self):
        net = _two_layer(np.random.default_rng(0))
        state = net.state_dict()
        state["0.weight"] = np.zeros((1, 1))
        with pytest.raises(ShapeError):
            net.load_state_dict(state)


# ============================================================================
# Helpers
# ============================================================================


def _two_layer(rng) -> Network:
    return Network([Dense(4, 6, rng), ReLU(), Dense(6, 3, rng)])


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _check_gradients(net: Network, x: np.ndarray, rng, step: float = 1e-5, tol: float = 1e-4):
    """loss = sum(weights * output) with fixed random weights; compare against central differences."""
    weights = rng.normal(size=net.forward(x).shape)

    def loss() -> float:
        return float(np.sum(weights * net.forward(x)))

    net.zero_grad()
    net.forward(x)
    grad_in, grads = backward(net, weights)

    numeric_in = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + step
        up = loss()
        x[idx] = original - step
        down = loss()
        x[idx] = original
        numeric_in[idx] = (up - down) / (2 * step)
    assert _relative_error(grad_in, numeric_in) < tol

    for tensor, analytic in zip(net.parameters(), grads):
        numeric = np.zeros_like(tensor.values)
        for idx in np.ndindex(tensor.shape):
            original = tensor.values[idx]
            tensor.values[idx] = original + step
            up = loss()
            tensor.values[idx] = original - step
            down = loss()
            tensor.values[idx] = original
            numeric[idx] = (up - down) / (2 * step)
        assert _relative_error(analytic, numeric) < tol
