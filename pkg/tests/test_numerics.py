import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcn2.errors import GradientError, ShapeError
from dcn2.numerics import (
    AdamState,
    adam_step,
    adam_step_rows,
    affine_backward,
    affine_forward,
    finite_difference_check,
    quadratic_probe,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_bce,
)


class TestAffine:
    def test_zero_map(self):
        out = affine_forward(np.zeros((2, 2)), np.array([3.0, 4.0]), np.zeros(2))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_identity_plus_shift(self):
        out = affine_forward(np.eye(2), np.array([3.0, 4.0]), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(out, [4.0, 3.0])

    def test_hand_matvec(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = affine_forward(W, np.array([1.0, 1.0]), np.zeros(2))
        np.testing.assert_array_equal(out, [3.0, 7.0])

    def test_batch_matches_vector(self):
        rng = np.random.default_rng(0)
        W, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
        X = rng.standard_normal((5, 4))
        batched = affine_forward(W, X, b)
        for i in range(5):
            np.testing.assert_allclose(batched[i], affine_forward(W, X[i], b), rtol=1e-12)

    def test_shape_error_names_dims(self):
        with pytest.raises(ShapeError, match="W.cols=2 does not match x.len=3"):
            affine_forward(np.zeros((2, 2)), np.zeros(3), np.zeros(2))
        with pytest.raises(ShapeError):
            affine_forward(np.zeros((2, 2)), np.zeros(2), np.zeros(3))

    def test_backward_zero_upstream(self):
        gW, gx, gb = affine_backward(np.eye(2), np.array([1.0, 2.0]), np.zeros(2))
        assert not gW.any() and not gx.any() and not gb.any()

    def test_backward_identity_transpose(self):
        _, gx, _ = affine_backward(np.eye(2), np.array([1.0, 2.0]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(gx, [1.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        rows, cols = rng.integers(1, 6, size=2)
        W = rng.standard_normal((rows, cols))
        x = rng.standard_normal(cols)
        b = rng.standard_normal(rows)
        probe = rng.standard_normal(rows)

        def f(params):
            return float(probe @ affine_forward(params["W"], params["x"], params["b"]))

        gW, gx, gb = affine_backward(W, x, probe)
        report = finite_difference_check(f, {"W": W, "x": x, "b": b},
                                         {"W": gW, "x": gx, "b": gb}, tolerance=1e-6)
        assert report.ok, report.max_rel_error


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_backward_gating(self):
        out = relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0]))
        np.testing.assert_array_equal(out, [0.0, 5.0])

    def test_subgradient_at_zero_is_zero(self):
        assert relu_backward(np.array([0.0]), np.array([7.0]))[0] == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 9))
        x = rng.standard_normal(n)
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        probe = rng.standard_normal(n)

        def f(params):
            return float(probe @ relu(params["x"]))

        report = finite_difference_check(f, {"x": x}, {"x": relu_backward(x, probe)},
                                         tolerance=1e-6)
        assert report.ok, report.max_rel_error


class TestSigmoidBce:
    def test_symmetry_at_zero(self):
        loss, grad = sigmoid_bce(0.0, 1)
        assert loss == pytest.approx(math.log(2), rel=1e-12)
        assert grad == pytest.approx(-0.5, rel=1e-12)
        loss, grad = sigmoid_bce(0.0, 0)
        assert loss == pytest.approx(math.log(2), rel=1e-12)
        assert grad == pytest.approx(0.5, rel=1e-12)

    def test_hand_case(self):
        loss, grad = sigmoid_bce(2.0, 1)
        assert loss == pytest.approx(0.126928, abs=1e-6)
        assert grad == pytest.approx(-0.119203, abs=1e-6)

    def test_no_overflow_at_extreme_logits(self):
        for z in (-1e3, 1e3):
            for y in (0, 1):
                loss, grad = sigmoid_bce(z, y)
                assert np.isfinite(loss) and np.isfinite(grad)
        loss, _ = sigmoid_bce(1e3, 0)
        assert loss == pytest.approx(1e3)

    @given(st.floats(-1e3, 1e3), st.integers(0, 1))
    def test_loss_nonneg_grad_strictly_bounded(self, z, y):
        loss, grad = sigmoid_bce(z, y)
        assert loss >= 0.0
        assert -1.0 < grad < 1.0

    def test_gradient_matches_finite_differences(self):
        for z in (-3.0, -0.2, 0.7, 4.0):
            for y in (0, 1):
                _, grad = sigmoid_bce(z, y)
                h = 1e-6
                fd = (sigmoid_bce(z + h, y)[0] - sigmoid_bce(z - h, y)[0]) / (2 * h)
                assert grad == pytest.approx(fd, rel=1e-6)


class TestAdam:
    def test_zero_gradients_fixed_point(self):
        p = np.array([1.0, -2.0, 3.0])
        state = AdamState.for_param(p, learning_rate=0.1, beta1=0.9)
        state.first_moment[:] = 0.5
        state.second_moment[:] = 0.25
        before = p.copy()
        adam_step(p, np.zeros(3), state)
        np.testing.assert_array_equal(p, before)
        np.testing.assert_allclose(state.first_moment, 0.45)
        np.testing.assert_allclose(state.second_moment, 0.25 * 0.999)

    def test_first_step_unit_gradient(self):
        p = np.full(4, 10.0)
        state = AdamState.for_param(p, learning_rate=0.01, beta1=0.9)
        adam_step(p, np.ones(4), state)
        np.testing.assert_allclose(p, 10.0 - 0.01, rtol=1e-6)

    def test_beta1_zero_equals_rmsprop_style(self):
        rng = np.random.default_rng(3)
        p = rng.standard_normal(6)
        q = p.copy()
        state = AdamState.for_param(p, learning_rate=0.05, beta1=0.0)
        # direct implementation of the beta1 = 0 special case
        v = np.zeros_like(q)
        for t in range(1, 11):
            g = rng.standard_normal(6)
            adam_step(p, g, state)
            v = 0.999 * v + 0.001 * g ** 2
            v_hat = v / (1 - 0.999 ** t)
            q -= 0.05 * g / (np.sqrt(v_hat) + 1e-8)
            np.testing.assert_allclose(p, q, rtol=1e-12)

    def test_nonfinite_gradient_names_group(self):
        p = np.zeros(2)
        state = AdamState.for_param(p, 0.1, 0.9)
        with pytest.raises(GradientError, match="deep.W0"):
            adam_step(p, np.array([np.nan, 1.0]), state, group="deep.W0")

    def test_sparse_rows_match_dense_when_all_touched(self):
        rng = np.random.default_rng(5)
        dense = rng.standard_normal((8, 3))
        sparse = dense.copy()
        sd = AdamState.for_param(dense, 0.02, 0.9)
        ss = AdamState.for_param(sparse, 0.02, 0.9)
        rows = np.arange(8)
        for _ in range(5):
            g = rng.standard_normal((8, 3))
            adam_step(dense, g, sd)
            adam_step_rows(sparse, rows, g, ss)
            np.testing.assert_allclose(dense, sparse, rtol=1e-12)

    def test_sparse_rows_leave_untouched_rows_alone(self):
        rng = np.random.default_rng(6)
        p = rng.standard_normal((10, 4))
        before = p.copy()
        state = AdamState.for_param(p, 0.1, 0.9)
        rows = np.array([2, 7])
        adam_step_rows(p, rows, rng.standard_normal((2, 4)), state)
        untouched = np.setdiff1d(np.arange(10), rows)
        np.testing.assert_array_equal(p[untouched], before[untouched])
        assert not np.array_equal(p[rows], before[rows])


class TestFiniteDifferenceCheck:
    def test_quadratic_analytic_case(self):
        f, params, grads = quadratic_probe(dim=4, seed=1)
        report = finite_difference_check(f, params, grads, tolerance=1e-8)
        assert report.ok
        assert report.worst < 1e-8

    def test_flags_wrong_gradient(self):
        f, params, grads = quadratic_probe(dim=3, seed=2)
        grads = {"x": grads["x"] + 0.5}
        report = finite_difference_check(f, params, grads, tolerance=1e-4)
        assert not report.ok
        assert "x" in report.flagged
