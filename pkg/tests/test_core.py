import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqte.core import (
    ConfigurationError,
    DataError,
    DimensionError,
    GroupSample,
    Loading,
    QuantileLevel,
    SolverOptions,
    as_tau,
    check_loss,
    quantile_adjusted_covariance,
    sample_covariance,
    score,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
taus = st.floats(0.051, 0.949)


@pytest.mark.parametrize("x, tau, expected", [(2.0, 0.5, 1.0), (-1.0, 0.3, 0.7), (0.0, 0.2, 0.0), (0.0, 0.9, 0.0)])
def test_check_loss_values(x, tau, expected):
    assert check_loss(x, tau) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x, tau, expected", [(1.0, 0.5, 0.5), (0.0, 0.3, -0.7), (-3.2, 0.8, -0.2)])
def test_score_values(x, tau, expected):
    assert score(x, tau) == pytest.approx(expected, abs=1e-15)


def test_score_indicator_includes_zero():
    out = score(np.array([-1e-300, 0.0, 1e-300]), 0.25)
    np.testing.assert_array_equal(out, [-0.75, -0.75, 0.25])


def test_score_accepts_quantile_level():
    assert score(1.0, QuantileLevel(0.4)) == pytest.approx(0.4)


@given(finite, taus)
def test_check_loss_is_x_times_score(x, tau):
    assert check_loss(x, tau) == x * score(x, tau)
    assert check_loss(x, tau) >= 0.0


@given(finite, finite, st.floats(0, 1), taus)
def test_check_loss_convex(x1, x2, theta, tau):
    mix = theta * x1 + (1 - theta) * x2
    rhs = theta * check_loss(x1, tau) + (1 - theta) * check_loss(x2, tau)
    assert check_loss(mix, tau) <= rhs + 1e-9 * (1 + abs(rhs))


def test_sample_covariance_examples():
    np.testing.assert_array_equal(sample_covariance(np.array([[1.0, 2.0]])), [[1, 2], [2, 4]])
    np.testing.assert_array_equal(sample_covariance(GroupSample([[1, 0], [0, 1]], [0, 0])),
                                  [[0.5, 0], [0, 0.5]])


def test_sample_covariance_matches_loops(rng):
    X = rng.standard_normal((5, 3))
    ref = np.zeros((3, 3))
    for i in range(5):
        for a in range(3):
            for b in range(3):
                ref[a, b] += X[i, a] * X[i, b] / 5
    np.testing.assert_allclose(sample_covariance(GroupSample(X, np.zeros(5))), ref, atol=1e-12)


def test_adjusted_covariance_examples(rng):
    np.testing.assert_array_equal(quantile_adjusted_covariance(np.array([[1.0, 1.0]]), [2.0]),
                                  [[4, 4], [4, 4]])
    s = GroupSample(rng.standard_normal((7, 3)), np.zeros(7))
    np.testing.assert_allclose(quantile_adjusted_covariance(s, np.ones(7)), sample_covariance(s),
                               atol=1e-15)


def test_adjusted_covariance_matches_loops(rng):
    X = rng.standard_normal((6, 2))
    eta = rng.uniform(0.5, 3, 6)
    ref = sum(eta[i] ** 2 * np.outer(X[i], X[i]) for i in range(6)) / 6
    np.testing.assert_allclose(quantile_adjusted_covariance(GroupSample(X, np.zeros(6)), eta), ref,
                               atol=1e-12)


def test_adjusted_covariance_errors(rng):
    s = GroupSample(rng.standard_normal((4, 2)), np.zeros(4))
    with pytest.raises(DimensionError):
        quantile_adjusted_covariance(s, np.ones(3))
    with pytest.raises(DataError):
        quantile_adjusted_covariance(s, [1.0, 0.0, 1.0, 1.0])


@settings(max_examples=30)
@given(st.integers(2, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_covariances_symmetric_psd(n, p, seed):
    r = np.random.default_rng(seed)
    s = GroupSample(r.standard_normal((n, p)) * r.uniform(0.1, 10), np.zeros(n))
    for S in (sample_covariance(s), quantile_adjusted_covariance(s, r.uniform(0.1, 5, n))):
        assert np.array_equal(S, S.T)
        for _ in range(5):
            v = r.standard_normal(p)
            assert v @ S @ v >= -1e-10 * (1 + np.abs(S).max())


class TestContainers:
    def test_group_sample_validates(self):
        with pytest.raises(DimensionError):
            GroupSample(np.ones((3, 2)), np.ones(4))
        with pytest.raises(DataError):
            GroupSample(np.ones((1, 2)), np.ones(1))
        with pytest.raises(DataError):
            GroupSample([[1.0], [np.nan]], [1.0, 2.0])
        with pytest.raises(ConfigurationError):
            GroupSample(np.ones((2, 1)), np.ones(2), group_id=3)

    def test_group_sample_is_read_only(self):
        s = GroupSample(np.ones((2, 2)), np.ones(2))
        with pytest.raises(ValueError):
            s.X[0, 0] = 5.0

    def test_loading_requires_positive_norm(self):
        with pytest.raises(DataError):
            Loading(np.zeros(3))
        with pytest.raises(DataError):
            Loading([1.0, np.inf])
        assert Loading([3.0, 4.0]).norm == 5.0

    @pytest.mark.parametrize("tau", [0.0, 0.05, 0.95, 1.0, -0.2])
    def test_quantile_level_bounds(self, tau):
        with pytest.raises(ConfigurationError):
            QuantileLevel(tau)

    def test_quantile_level_configurable_set(self):
        assert QuantileLevel(0.02, lower=0.01, upper=0.99).tau == 0.02
        assert as_tau(QuantileLevel(0.3)) == 0.3


class TestSolverOptions:
    def test_defaults_valid(self):
        SolverOptions().validate()

    def test_from_dict_alias_and_unknown(self):
        assert SolverOptions.from_dict({"tolerance": 1e-5}).tol == 1e-5
        with pytest.raises(ConfigurationError, match="bogus"):
            SolverOptions.from_dict({"bogus": 1})

    def test_all_problems_reported(self):
        with pytest.raises(ConfigurationError) as exc:
            SolverOptions.from_dict({"max_iter": 0, "tol": -1.0})
        assert "max_iter" in str(exc.value) and "tol" in str(exc.value)

    def test_round_trip(self):
        o = SolverOptions(lambda_grid=(1.0, 2.0), rho=3.0)
        assert SolverOptions.from_dict(o.to_dict()) == o
