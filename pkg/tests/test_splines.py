import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcie.splines import (
    KnotError,
    basis_derivative,
    build_natural_cubic_basis,
    build_piecewise_constant_basis,
    eval_basis,
    place_knots,
    type7_quantile,
    weight_basis,
)


def second_difference(basis, t, h=1e-3):
    return (basis(t + h) - 2 * basis(t) + basis(t - h)) / h**2


def truncated_power_natural(knots, t):
    """Classical natural-spline basis (d_k - d_{K-1}) with the constant and
    linear columns; an independent construction of the same span."""
    t = np.asarray(t, float)
    K = len(knots)

    def d(k):
        num = np.clip(t - knots[k], 0, None) ** 3 - np.clip(t - knots[-1], 0, None) ** 3
        return num / (knots[-1] - knots[k])

    cols = [np.ones_like(t), t] + [d(k) - d(K - 2) for k in range(K - 2)]
    return np.column_stack(cols)


class TestNaturalCubic:
    def test_dimension_two_inner_knots(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        assert b.dimension == 4
        assert b(np.array([-24.0, -3.0])).shape == (2, 4)

    def test_intercept_column_is_one(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        np.testing.assert_array_equal(b([-24, -11.3, 0])[:, 0], [1.0, 1.0, 1.0])

    def test_zero_second_derivative_at_boundaries(self):
        b = build_natural_cubic_basis([-12], (-24, 0))
        for t in (-24.0, 0.0):
            # one-sided inside differences converge to the boundary value
            assert np.all(np.abs(basis_derivative(b, [t], 2)) < 1e-12)
            assert np.all(np.abs(second_difference(b, np.array([t]))) < 1e-6)

    def test_linear_beyond_boundaries(self):
        b = build_natural_cubic_basis([-12], (-24, 0))
        p0, p1 = b(-24.0), b(-24.5)
        slope = (p1 - p0) / -0.5
        for t in (-30.0, -28.0):
            np.testing.assert_allclose(b(t), p0 + slope * (t + 24.0), atol=1e-8)
        for t in np.linspace(-60, -24.01, 15).tolist() + np.linspace(0.01, 40, 15).tolist():
            assert np.all(np.abs(second_difference(b, np.array([t]))) < 1e-6)

    def test_continuous_at_boundary(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        for t in (-24.0, -16.0, 0.0):
            assert np.all(np.isfinite(b(t)))
            assert np.max(np.abs(b(t + 1e-9) - b(t - 1e-9))) < 1e-6

    def test_scalar_evaluation(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        assert eval_basis(b, -3.0).shape == (4,)

    @pytest.mark.parametrize(
        "interior, boundary",
        [([-8, -16], (-24, 0)), ([-24], (-24, 0)), ([], (-24, 0)), ([-5], (0, -24)), ([-5, -5], (-24, 0))],
    )
    def test_invalid_knots(self, interior, boundary):
        with pytest.raises(KnotError):
            build_natural_cubic_basis(interior, boundary)

    def test_non_finite_time_rejected(self):
        b = build_natural_cubic_basis([-12], (-24, 0))
        with pytest.raises(ValueError):
            b([np.nan])

    def test_span_matches_truncated_power_basis(self):
        knots = [-24.0, -17.0, -9.0, -4.0, 0.0]
        b = build_natural_cubic_basis(knots[1:-1], (knots[0], knots[-1]))
        rng = np.random.default_rng(1)
        t = rng.uniform(-30, 6, 300)
        y = np.sin(t / 4) + rng.normal(0, 0.1, t.size)
        A, Bt = b(t), truncated_power_natural(knots, t)
        fit_a = A @ np.linalg.lstsq(A, y, rcond=None)[0]
        fit_b = Bt @ np.linalg.lstsq(Bt, y, rcond=None)[0]
        np.testing.assert_allclose(fit_a, fit_b, atol=1e-8)

    def test_cardinal_coordinates(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        np.testing.assert_allclose(b(b.knots)[:, 1:], np.eye(4)[:, 1:], atol=1e-12)

    def test_pickle_round_trip(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        c = pickle.loads(pickle.dumps(b))
        assert c == b and hash(c) == hash(b)
        np.testing.assert_array_equal(c(np.linspace(-30, 5, 9)), b(np.linspace(-30, 5, 9)))


class TestPiecewiseConstant:
    breaks = [-24, -19, -14, -9, -4, 0]

    def test_five_year_intervals(self):
        b = build_piecewise_constant_basis(self.breaks)
        assert b.dimension == 5
        np.testing.assert_array_equal(b.interval_indicators([-21.0])[0], [1, 0, 0, 0, 0])
        np.testing.assert_array_equal(b(-21.0), [1, 0, 0, 0, 0])
        np.testing.assert_array_equal(b(-11.0), [1, 0, 1, 0, 0])

    def test_partition_property(self):
        b = build_piecewise_constant_basis(self.breaks)
        t = np.concatenate([np.linspace(-24, 0, 2401), np.array(self.breaks, float)])
        ind = b.interval_indicators(t)
        np.testing.assert_array_equal(ind.sum(axis=1), 1.0)
        assert set(np.unique(ind)) <= {0.0, 1.0}

    def test_breakpoint_ties(self):
        b = build_piecewise_constant_basis(self.breaks)
        ind = b.interval_indicators([-24, -19, -14, -9, -4, 0])
        # left-closed, right-open; the last interval is closed
        np.testing.assert_array_equal(ind.argmax(axis=1), [0, 1, 2, 3, 4, 4])

    def test_intercept_column_and_span(self):
        b = build_piecewise_constant_basis(self.breaks)
        t = np.linspace(-24, 0, 97)
        X, P = b(t), b.interval_indicators(t)
        np.testing.assert_array_equal(X[:, 0], 1.0)
        # reference coding and one-hot span the same space
        coef = np.linalg.lstsq(P, X, rcond=None)[0]
        np.testing.assert_allclose(P @ coef, X, atol=1e-12)

    def test_weight_basis_five_intervals(self):
        b = weight_basis(24, 5, "piecewise")
        np.testing.assert_allclose(b.knots, self.breaks)
        counts = b.interval_indicators(np.arange(-24, 1.0)).sum(axis=0)
        np.testing.assert_array_equal(counts, [5, 5, 5, 5, 5])

    def test_interval_indicators_need_piecewise(self):
        with pytest.raises(TypeError):
            weight_basis(24, 2).interval_indicators([0.0])


class TestKnots:
    def test_equidistant(self):
        np.testing.assert_allclose(place_knots([-24, -3, 0], 2, "equidistant"), [-16, -8])

    def test_percentile_ties(self):
        times = np.repeat([-24, -18, -12, -6, 0], 10)
        assert place_knots(times, 2) == [-18.0, -6.0]

    def test_percentile_matches_type7_definition(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-24, 0, 137)
        p = np.arange(1, 5) / 5
        # numpy's default 'linear' method is the type-7 definition
        np.testing.assert_allclose(type7_quantile(x, p), np.quantile(x, p), rtol=0, atol=1e-12)
        np.testing.assert_allclose(place_knots(x, 4), np.quantile(x, p), atol=1e-12)

    def test_percentile_sort_and_index_oracle(self):
        x = np.array([5.0, 1.0, 3.0, 2.0, 4.0])
        # h = (n - 1) p = 1 at p = 0.25: exactly the second order statistic
        assert type7_quantile(x, [0.25])[0] == 2.0
        assert type7_quantile(x, [0.6])[0] == pytest.approx(3.4)

    def test_degenerate_range(self):
        with pytest.raises(KnotError):
            place_knots([-3, -3, -3], 1)

    def test_duplicate_knots_reported(self):
        times = np.r_[np.full(50, -12.0), -24.0, 0.0, -6.0, -18.0]
        with pytest.raises(KnotError):
            place_knots(times, 3)

    def test_count_must_be_positive(self):
        with pytest.raises(KnotError):
            place_knots([-24, 0], 0)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-23.5, -0.5), min_size=1, max_size=5, unique=True),
    st.floats(-200, 200),
)
def test_natural_basis_properties(interior, t):
    interior = sorted(interior)
    if np.min(np.diff([-24, *interior, 0])) < 0.05:
        return
    b = build_natural_cubic_basis(interior, (-24, 0))
    v = b(t)
    assert v.shape == (len(interior) + 2,)
    assert v[0] == 1.0
    if t < -24.01 or t > 0.01:
        assert np.all(np.abs(second_difference(b, np.array([t]))) < 1e-6)
