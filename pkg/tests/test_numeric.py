import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxadapt.errors import EmptyBatchError, LabelRangeError, ParameterError, ShapeError, StateError
from ctxadapt.numeric import (
    LinearLayer,
    SgdState,
    batch_mean_backward,
    batch_mean_forward,
    cosine_lr,
    linear_backward,
    linear_forward,
    make_rng,
    softmax,
    softmax_cross_entropy,
    sgd_step,
)

from conftest import relative_error


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 4)).astype(np.float32)
        layer = LinearLayer(np.eye(4, dtype=np.float32), np.zeros(4, dtype=np.float32))
        np.testing.assert_array_equal(linear_forward(layer, x), x)

    def test_zero_weight_gives_bias(self):
        b = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        layer = LinearLayer(np.zeros((2, 3), dtype=np.float32), b)
        out = linear_forward(layer, np.ones((4, 2), dtype=np.float32))
        np.testing.assert_array_equal(out, np.tile(b, (4, 1)))

    def test_matches_triple_loop(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        layer = LinearLayer.init_uniform(4, 2, rng)
        expected = triple_loop_matmul(x, layer.weight) + layer.bias
        np.testing.assert_allclose(linear_forward(layer, x), expected, atol=1e-6)

    def test_shape_error(self, rng):
        layer = LinearLayer.init_uniform(4, 2, rng)
        with pytest.raises(ShapeError):
            linear_forward(layer, np.zeros((3, 5), dtype=np.float32))

    def test_backward_before_forward(self, rng):
        with pytest.raises(StateError):
            linear_backward(LinearLayer.init_uniform(2, 2, rng), np.zeros((1, 2)))

    def test_zero_grad_out(self, rng):
        layer = LinearLayer.init_uniform(3, 2, rng)
        linear_forward(layer, rng.standard_normal((4, 3)).astype(np.float32))
        gin = linear_backward(layer, np.zeros((4, 2), dtype=np.float32))
        assert not gin.any() and not layer.grad_weight.any() and not layer.grad_bias.any()

    def test_scalar_chain_rule(self):
        layer = LinearLayer(np.array([[3.0]]), np.array([0.5]))
        linear_forward(layer, np.array([[2.0]]))
        gin = linear_backward(layer, np.array([[-1.5]]))
        assert layer.grad_weight[0, 0] == 2.0 * -1.5
        assert gin[0, 0] == 3.0 * -1.5

    def test_backward_matches_finite_differences(self, rng):
        x = rng.standard_normal((5, 4))
        layer = LinearLayer(rng.standard_normal((4, 3)), rng.standard_normal(3))
        target = rng.standard_normal((5, 3))

        def loss():
            return 0.5 * float(((x @ layer.weight + layer.bias - target) ** 2).sum())

        out = linear_forward(layer, x)
        gin = linear_backward(layer, out - target)
        eps = 1e-6
        fd_w = np.zeros_like(layer.weight)
        for idx in np.ndindex(layer.weight.shape):
            orig = layer.weight[idx]
            layer.weight[idx] = orig + eps
            up = loss()
            layer.weight[idx] = orig - eps
            down = loss()
            layer.weight[idx] = orig
            fd_w[idx] = (up - down) / (2 * eps)
        fd_x = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            up = loss()
            x[idx] = orig - eps
            down = loss()
            x[idx] = orig
            fd_x[idx] = (up - down) / (2 * eps)
        assert relative_error(layer.grad_weight, fd_w) < 1e-6
        assert relative_error(gin, fd_x) < 1e-6


class TestBatchMean:
    def test_single_row_is_bitwise(self, rng):
        row = rng.standard_normal((1, 7)).astype(np.float32)
        assert batch_mean_forward(row).tobytes() == row[0].tobytes()

    def test_symmetric_rows_cancel(self, rng):
        r = rng.standard_normal(5).astype(np.float32)
        np.testing.assert_array_equal(batch_mean_forward(np.stack([r, -r])), np.zeros(5, dtype=np.float32))

    def test_matches_column_loop(self, rng):
        m = rng.standard_normal((5, 3))
        expected = [sum(m[i, j] for i in range(5)) / 5 for j in range(3)]
        np.testing.assert_allclose(batch_mean_forward(m), expected, rtol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyBatchError):
            batch_mean_forward(np.zeros((0, 3)))
        with pytest.raises(EmptyBatchError):
            batch_mean_backward(np.zeros(3), 0)

    def test_backward(self):
        g = np.array([2.0, -4.0])
        np.testing.assert_array_equal(batch_mean_backward(g, 1), [[2.0, -4.0]])
        np.testing.assert_array_equal(batch_mean_backward(g, 4), np.tile([0.5, -1.0], (4, 1)))
        assert not batch_mean_backward(np.zeros(3), 5).any()

    def test_backward_composes_with_forward(self, rng):
        x = rng.standard_normal((6, 3))
        w = rng.standard_normal(3)
        grad = batch_mean_backward(w, 6)  # d/dx of w . mean(x)
        eps = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            up = w @ batch_mean_forward(x)
            x[idx] = orig - eps
            down = w @ batch_mean_forward(x)
            x[idx] = orig
            fd[idx] = (up - down) / (2 * eps)
        assert relative_error(grad, fd) < 1e-8


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((3, 4))
        labels = np.array([0, 2, 3])
        logits[np.arange(3), labels] = 1000.0
        loss, grad = softmax_cross_entropy(logits, labels)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.abs(grad).max() < 1e-12

    def test_grad_matches_finite_differences(self, rng):
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 2])
        _, grad = softmax_cross_entropy(logits, labels)
        fd = np.zeros_like(logits)
        eps = 1e-6
        for idx in np.ndindex(logits.shape):
            orig = logits[idx]
            logits[idx] = orig + eps
            up = softmax_cross_entropy(logits, labels)[0]
            logits[idx] = orig - eps
            down = softmax_cross_entropy(logits, labels)[0]
            logits[idx] = orig
            fd[idx] = (up - down) / (2 * eps)
        assert relative_error(grad, fd) < 1e-6

    def test_float32_grad_matches_float64_differences(self, rng):
        logits = rng.standard_normal((4, 3)) * 10
        labels = np.array([1, 0, 0, 2])
        _, grad32 = softmax_cross_entropy(logits.astype(np.float32), labels)
        assert grad32.dtype == np.float32
        _, grad64 = softmax_cross_entropy(logits, labels)
        assert relative_error(grad32, grad64) < 1e-3

    def test_label_out_of_range(self):
        with pytest.raises(LabelRangeError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**31))
    def test_softmax_rows_sum_to_one_and_loss_nonnegative(self, n, c, seed):
        r = np.random.default_rng(seed)
        logits = r.standard_normal((n, c)) * 50
        np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-6)
        loss, _ = softmax_cross_entropy(logits, r.integers(0, c, n))
        assert loss >= 0


class TestCosineLr:
    def test_endpoints(self):
        assert cosine_lr(0, 15, 0.1) == 0.1
        assert cosine_lr(15, 15, 0.1, 0.01) == pytest.approx(0.01, abs=1e-15)
        assert cosine_lr(5, 10, 0.3, 0.1) == pytest.approx(0.2, abs=1e-15)

    def test_range_error(self):
        with pytest.raises(ParameterError):
            cosine_lr(16, 15, 0.1)
        with pytest.raises(ParameterError):
            cosine_lr(0, 0, 0.1)

    @given(st.integers(1, 200), st.floats(1e-6, 10), st.floats(0, 1))
    def test_monotone(self, total, eta_max, frac):
        eta_min = eta_max * frac * 0.99
        values = [cosine_lr(e, total, eta_max, eta_min) for e in range(total + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(eta_min - 1e-12 <= v <= eta_max + 1e-12 for v in values)


class TestSgd:
    def test_zero_grads_no_decay_is_noop(self, rng):
        p = rng.standard_normal(4)
        before = p.copy()
        sgd_step([p], [np.zeros(4)], SgdState(0.1, momentum=0.9, weight_decay=0.0))
        np.testing.assert_array_equal(p, before)

    def test_vanilla(self):
        p = np.array([1.0, 2.0])
        g = np.array([0.5, -1.0])
        sgd_step([p], [g], SgdState(0.1, momentum=0.0, weight_decay=0.0))
        np.testing.assert_allclose(p, [0.95, 2.1])
        assert not g.any(), "gradients are zeroed after the step"

    def test_two_momentum_steps_by_hand(self):
        # v1 = g1 + wd*p0; p1 = p0 - lr*v1; v2 = m*v1 + g2 + wd*p1; p2 = p1 - lr*v2
        p0, g1, g2, lr, m, wd = 1.0, 0.5, -0.25, 0.1, 0.9, 0.01
        v1 = g1 + wd * p0
        p1 = p0 - lr * v1
        v2 = m * v1 + g2 + wd * p1
        p2 = p1 - lr * v2
        p = np.array([p0])
        state = SgdState(lr, momentum=m, weight_decay=wd, total_epochs=10)
        sgd_step([p], [np.array([g1])], state)
        assert p[0] == pytest.approx(p1, abs=1e-15)
        sgd_step([p], [np.array([g2])], state)
        assert p[0] == pytest.approx(p2, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step([np.zeros(3)], [np.zeros(4)], SgdState(0.1))

    def test_lr_follows_schedule(self):
        state = SgdState(0.2, total_epochs=4, epoch_index=2)
        assert state.learning_rate == cosine_lr(2, 4, 0.2)

    def test_preserves_float32(self, rng):
        p = rng.standard_normal(3).astype(np.float32)
        sgd_step([p], [np.ones(3, dtype=np.float32)], SgdState(0.1))
        assert p.dtype == np.float32


def test_rng_is_deterministic():
    a = make_rng(7).uniform(size=5)
    b = make_rng(7).uniform(size=5)
    assert a.tobytes() == b.tobytes()
