import math

import numpy as np
import pytest

from app.errors import InvalidInputError, OracleError, ShapeError
from app.services.numerics import (
    RngStream,
    finite_diff_grad,
    mse,
    ordered_sum,
    relative_error,
    sigmoid,
    softmax,
)


class TestSigmoid:
    """Tests for the logistic function"""

    def test_zero(self):
        """sigmoid(0) is one half"""
        assert sigmoid([0.0])[0] == 0.5

    def test_saturation(self):
        """large inputs saturate without overflow"""
        out = sigmoid([-1000.0, 1000.0])
        assert abs(out[0]) < 1e-12
        assert abs(out[1] - 1.0) < 1e-12

    def test_hand_value(self):
        """sigmoid(1) by hand"""
        assert sigmoid([1.0])[0] == pytest.approx(0.7310585786, abs=1e-9)

    def test_monotone(self):
        """sigmoid is non-decreasing and stays in (0, 1]"""
        xs = np.linspace(-30, 30, 601)
        ys = sigmoid(xs)
        assert np.all(np.diff(ys) >= 0)
        assert np.all((ys > 0) & (ys <= 1))

    def test_rejects_non_finite(self):
        """NaN input is refused"""
        with pytest.raises(InvalidInputError):
            sigmoid([np.nan])


class TestSoftmax:
    """Tests for softmax"""

    def test_uniform(self):
        """equal scores give equal weights"""
        assert np.allclose(softmax([2.0, 2.0, 2.0]), [1 / 3] * 3, atol=1e-15)

    def test_single(self):
        """one score gets all the weight"""
        assert softmax([42.0])[0] == 1.0

    def test_hand_value(self):
        """scores 0 and ln 3 give 1/4 and 3/4"""
        out = softmax([0.0, math.log(3.0)])
        assert out == pytest.approx([0.25, 0.75], abs=1e-12)

    def test_shift_invariant(self, rng):
        """adding a constant does not change softmax"""
        v = rng.normal(1.0, 7)
        assert np.allclose(softmax(v), softmax(v + 123.0), atol=1e-12)

    def test_permutation_equivariant(self, rng):
        """permuting scores permutes weights"""
        v = rng.normal(1.0, 5)
        perm = rng.permutation(5)
        assert np.allclose(softmax(v)[perm], softmax(v[perm]), atol=1e-15)

    def test_empty_is_invalid(self):
        """an empty score vector is refused"""
        with pytest.raises(InvalidInputError):
            softmax([])


class TestMse:
    """Tests for mean squared error"""

    def test_identity(self):
        """equal vectors have zero error"""
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_unit_offsets(self):
        """unit offsets give error one"""
        assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0

    def test_hand_value(self):
        """a three-element hand case"""
        assert mse([1, 2, 3], [2, 2, 5]) == pytest.approx(5 / 3)

    def test_symmetric(self, rng):
        """mse is symmetric in its arguments"""
        a, b = rng.normal(1.0, 9), rng.normal(1.0, 9)
        assert mse(a, b) == mse(b, a)

    def test_length_mismatch(self):
        """vectors of different lengths are rejected"""
        with pytest.raises(ShapeError):
            mse([1.0], [1.0, 2.0])


class TestFiniteDifferences:
    """Tests for the central-difference gradient oracle"""

    def test_square(self):
        """d/dx x^2 at 1 is 2"""
        g = finite_diff_grad(lambda x: float(x[0] ** 2), [1.0], 1e-5)
        assert g[0] == pytest.approx(2.0, abs=1e-6)

    def test_constant(self):
        """a constant has zero gradient"""
        g = finite_diff_grad(lambda x: 3.0, [1.0, -2.0, 5.0])
        assert np.all(g == 0.0)

    def test_product(self):
        """gradient of x*y at (2, 3)"""
        g = finite_diff_grad(lambda x: float(x[0] * x[1]), [2.0, 3.0])
        assert g == pytest.approx([3.0, 2.0], abs=1e-6)

    def test_non_finite_evaluation(self):
        """a NaN evaluation stops the oracle"""
        with pytest.raises(OracleError):
            finite_diff_grad(lambda x: float("inf"), [0.0])

    def test_step_must_be_positive(self):
        """the difference step must be positive"""
        with pytest.raises(InvalidInputError):
            finite_diff_grad(lambda x: 0.0, [0.0], h=0.0)


class TestHelpers:
    """Tests for reductions and comparison helpers"""

    def test_ordered_sum_left_to_right(self):
        """summation follows list order"""
        vectors = [np.array([1e16]), np.array([1.0]), np.array([-1e16])]
        assert ordered_sum(vectors)[0] == (1e16 + 1.0) - 1e16

    def test_ordered_sum_empty(self):
        """summing nothing is rejected"""
        with pytest.raises(ShapeError):
            ordered_sum([])

    def test_relative_error(self):
        """relative error is scaled by the larger norm"""
        assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
        assert relative_error([2.0], [1.0]) == pytest.approx(0.5)


class TestRngStream:
    """Tests for seeded streams"""

    def test_same_seed_same_draws(self):
        """one seed gives one draw sequence"""
        a, b = RngStream(99), RngStream(99)
        assert np.array_equal(a.uniform(0.0, 1.0, 1_000_000), b.uniform(0.0, 1.0, 1_000_000))

    def test_forks_are_reproducible_and_distinct(self):
        """forks with one key agree and forks with different keys differ"""
        root = RngStream(5)
        first = root.fork(0, 1).normal(1.0, 10)
        again = RngStream(5).fork(0, 1).normal(1.0, 10)
        other = root.fork(0, 2).normal(1.0, 10)
        assert np.array_equal(first, again)
        assert not np.array_equal(first, other)

    def test_position_counts_draws(self):
        """the stream counts how many values it has drawn"""
        stream = RngStream(1)
        stream.normal(1.0, 4)
        stream.integers(0, 10)
        assert stream.position == 5

    def test_negative_seed(self):
        """negative seeds are refused"""
        with pytest.raises(InvalidInputError):
            RngStream(-1)
