import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusebench.nncore import ParamTensor, affine, child_seed, finite_diff_grad, seeded_rng, softmax

finite_floats = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


class TestAffine:
    def test_identity(self):
        out = affine(np.array([3.0, -1.0]), np.eye(2), np.zeros(2))
        assert np.array_equal(out, [3.0, -1.0])

    def test_hand_example_against_independent_loops(self):
        W = np.array([[1.0, 2.0], [0.0, 1.0]])
        b = np.array([1.0, 1.0])
        x = np.array([1.0, 1.0])
        # independent oracle: explicit index loops
        expected = np.array([sum(W[r, c] * x[c] for c in range(2)) + b[r] for r in range(2)])
        out = affine(x, W, b)
        assert np.array_equal(out, expected)
        assert np.array_equal(out, [4.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            affine(np.zeros(3), np.eye(2), np.zeros(2))

    @given(
        x=arrays(float, 3, elements=finite_floats),
        y=arrays(float, 3, elements=finite_floats),
        alpha=finite_floats,
        beta=finite_floats,
    )
    def test_linearity(self, x, y, alpha, beta):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        lhs = affine(alpha * x + beta * y, W, b)
        rhs = alpha * affine(x, W, b) + beta * affine(y, W, b) - (alpha + beta - 1) * b
        assert np.allclose(lhs, rhs, atol=1e-9 * max(1.0, abs(alpha) + abs(beta)), rtol=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(np.zeros(2)), [0.5, 0.5], atol=1e-15)

    @pytest.mark.parametrize("c", [0.0, -7.5, 1000.0])
    def test_analytic_shift(self, c):
        out = softmax(np.array([c, c + math.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_large_logit_no_overflow(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(out).all()
        assert out[0] > 1 - 1e-12 and out[1] < 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            softmax(np.array([np.inf, 0.0]))

    @given(z=arrays(float, st.integers(1, 8), elements=finite_floats), c=finite_floats)
    def test_sums_to_one_and_shift_invariant(self, z, c):
        out = softmax(z)
        assert abs(out.sum() - 1.0) <= 1e-12
        assert (out > 0).all()
        assert np.allclose(out, softmax(z + c), atol=1e-12)


class TestFiniteDiff:
    def test_square(self):
        grad = finite_diff_grad(lambda p: float(p[0] ** 2), np.array([3.0]), eps=1e-5)
        assert abs(grad[0] - 6.0) < 1e-8

    def test_constant(self):
        grad = finite_diff_grad(lambda p: 4.25, np.array([1.0, -2.0]), eps=1e-5)
        assert np.array_equal(grad, [0.0, 0.0])

    def test_sum_of_squares(self):
        grad = finite_diff_grad(lambda p: float((p**2).sum()), np.array([1.0, 2.0]), eps=1e-5)
        assert np.allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_quadratic_matches_closed_form(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(4, 4))
        A = A + A.T
        c = rng.normal(size=4)
        p0 = rng.normal(size=4)
        f = lambda p: float(0.5 * p @ A @ p + c @ p)
        grad = finite_diff_grad(f, p0, eps=1e-5)
        exact = A @ p0 + c
        assert np.abs(grad - exact).max() <= 1e-6 * max(1.0, np.abs(exact).max())

    def test_eps_range(self):
        with pytest.raises(ValueError, match="eps"):
            finite_diff_grad(lambda p: 0.0, np.zeros(1), eps=0.5)

    def test_nonfinite_function(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_grad(lambda p: float("nan"), np.zeros(1), eps=1e-5)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = seeded_rng(1234).random(100)
        b = seeded_rng(1234).random(100)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = seeded_rng(1).random(10)
        b = seeded_rng(2).random(10)
        assert not np.array_equal(a, b)

    def test_uniform_mean(self):
        draws = seeded_rng(99).random(100_000)
        assert abs(draws.mean() - 0.5) < 0.01

    def test_negative_seed_accepted(self):
        assert np.array_equal(seeded_rng(-5).random(3), seeded_rng(-5).random(3))

    def test_child_seed_stable_and_distinct(self):
        assert child_seed(7, "split", 0) == child_seed(7, "split", 0)
        assert child_seed(7, "split", 0) != child_seed(7, "split", 1)
        assert child_seed(7, "a") != child_seed(8, "a")


class TestParamTensor:
    def test_validate_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            ParamTensor("w", np.array([1.0, np.nan]))

    def test_bias_detection(self):
        assert ParamTensor("head.bias", np.zeros(2)).is_bias
        assert not ParamTensor("head.weight", np.zeros((2, 2))).is_bias

    def test_negative_depth_rejected(self):
        with pytest.raises(ValueError, match="depth_group"):
            ParamTensor("w", np.zeros(2), depth_group=-1)
