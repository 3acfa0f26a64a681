"""Estimator unit tests with hand-computed oracles."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialbias import (
    ConvergenceError,
    CovarianceSpec,
    DegenerateFitError,
    InvalidArgumentError,
    SingularDesignError,
    distance_matrix,
    gls_fit,
    gp_draws,
    ml_fit,
    ols_fit,
    sample_locations,
    wald_ci,
)
from spatialbias.geocore import as_rng

Z_95 = 1.9599639845400545

TOY_X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
TOY_Y = np.array([0.0, 1.0, 4.0])


class TestOls:
    def test_hand_oracle(self):
        # X'X = [[3,3],[3,5]], X'y = [5,9]: coef (-1/3, 2), rss 2/3.
        fit = ols_fit(TOY_X, TOY_Y, names=("intercept", "slope"))
        np.testing.assert_allclose(fit.coef, [-1.0 / 3.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(fit.cov, [[5 / 9, -1 / 3], [-1 / 3, 1 / 3]], atol=1e-12)
        np.testing.assert_allclose(fit.se, [math.sqrt(5 / 9), math.sqrt(1 / 3)], atol=1e-12)
        sigma2_ml = (2.0 / 3.0) / 3.0
        expected_loglik = -1.5 * (math.log(2 * math.pi) + math.log(sigma2_ml) + 1.0)
        assert fit.loglik == pytest.approx(expected_loglik, abs=1e-12)
        assert fit.n_params == 3
        assert fit.aic == pytest.approx(-2 * expected_loglik + 6, abs=1e-10)
        assert fit.method == "ols"
        assert fit.n_obs == 3
        assert fit.converged is True
        assert fit.fitted_cov is None

    def test_accessors(self):
        fit = ols_fit(TOY_X, TOY_Y, names=("intercept", "slope"))
        assert fit.coefficient("slope") == pytest.approx(2.0)
        lo, hi = fit.interval("slope")
        assert lo == pytest.approx(2.0 - Z_95 * math.sqrt(1 / 3))
        assert hi == pytest.approx(2.0 + Z_95 * math.sqrt(1 / 3))

    def test_default_names(self):
        fit = ols_fit(TOY_X, TOY_Y)
        assert fit.names == ("x0", "x1")

    def test_exact_fit_rejected(self):
        with pytest.raises(DegenerateFitError):
            ols_fit(TOY_X, np.array([0.0, 2.0, 4.0]))

    def test_underdetermined_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ols_fit(np.eye(2), np.array([1.0, 2.0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ols_fit(TOY_X, np.array([1.0, 2.0]))

    def test_singular_design_names_columns(self):
        X = np.column_stack([np.ones(5), np.arange(5.0), np.arange(5.0)])
        with pytest.raises(SingularDesignError) as err:
            ols_fit(X, np.arange(5.0) ** 2, names=("one", "trend", "copy"))
        assert set(err.value.columns) & {"trend", "copy"}

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_residuals_orthogonal_to_design(self, seed):
        rng = as_rng(seed)
        X = np.column_stack([np.ones(12), rng.standard_normal((12, 2))])
        y = rng.standard_normal(12)
        fit = ols_fit(X, y)
        resid = y - X @ fit.coef
        np.testing.assert_allclose(X.T @ resid, 0.0, atol=1e-9)


class TestWaldCi:
    def test_z_quantile(self):
        lo, hi = wald_ci(np.array([0.0]), np.array([1.0]), level=0.95)
        assert lo[0] == pytest.approx(-Z_95, abs=1e-12)
        assert hi[0] == pytest.approx(Z_95, abs=1e-12)

    def test_level_validation(self):
        with pytest.raises(InvalidArgumentError):
            wald_ci([0.0], [1.0], level=1.2)
        with pytest.raises(InvalidArgumentError):
            wald_ci([0.0], [1.0], level=0.0)

    def test_negative_se_rejected(self):
        with pytest.raises(InvalidArgumentError):
            wald_ci([0.0], [-1.0])


class TestGls:
    def test_two_point_oracle(self):
        # Weighted mean with precisions 1/2 and 1: (1/2 + 2) / (3/2) = 5/3.
        fit = gls_fit(np.ones((2, 1)), np.array([1.0, 2.0]), np.diag([2.0, 1.0]))
        assert fit.coef[0] == pytest.approx(5.0 / 3.0, abs=1e-12)
        assert fit.method == "gls"
        assert fit.n_params == 2

    def test_identity_matches_ols(self):
        rng = as_rng(3)
        X = np.column_stack([np.ones(40), rng.standard_normal((40, 2))])
        y = rng.standard_normal(40) + X @ np.array([1.0, 2.0, -0.5])
        a = ols_fit(X, y)
        b = gls_fit(X, y, np.eye(40))
        np.testing.assert_allclose(a.coef, b.coef, atol=1e-10)
        np.testing.assert_allclose(a.se, b.se, atol=1e-10)
        assert a.loglik == pytest.approx(b.loglik, abs=1e-10)
        assert a.aic == pytest.approx(b.aic, abs=1e-10)

    def test_scale_invariance(self):
        rng = as_rng(8)
        loc = sample_locations(30, seed=1)
        d = distance_matrix(loc)
        cov = CovarianceSpec("exponential", 2.0, variance=1.0).covariance(d)
        X = np.column_stack([np.ones(30), rng.standard_normal(30)])
        y = X @ np.array([0.5, 1.5]) + gp_draws(0.0, cov, rng, 1)[0]
        a = gls_fit(X, y, cov)
        b = gls_fit(X, y, 7.3 * cov)
        np.testing.assert_allclose(a.coef, b.coef, atol=1e-9)
        np.testing.assert_allclose(a.se, b.se, atol=1e-9)
        assert a.loglik == pytest.approx(b.loglik, abs=1e-8)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            gls_fit(TOY_X, TOY_Y, np.eye(4))


def _spatial_data(seed, n=60, nugget_share=0.0, spatial_range=2.0):
    loc = sample_locations(n, seed=seed)
    d = distance_matrix(loc)
    spec = CovarianceSpec(
        "exponential", spatial_range,
        variance=1.0 - nugget_share, nugget=nugget_share,
    )
    rng = as_rng(seed + 500)
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    noise = gp_draws(0.0, spec.covariance(d), rng, 1)[0]
    y = X @ np.array([1.0, 2.0]) + noise
    return X, y, d


class TestMl:
    def test_methods_and_params(self):
        X, y, d = _spatial_data(0)
        full = ml_fit(X, y, d)
        pure = ml_fit(X, y, d, fix_nugget=True)
        assert full.method == "ml"
        assert pure.method == "ml-nonugget"
        assert full.n_params == 2 + 3
        assert pure.n_params == 2 + 2
        assert full.aic == pytest.approx(-2 * full.loglik + 2 * full.n_params)
        assert pure.fitted_cov.nugget == 0.0
        assert full.fitted_cov.family == "exponential"
        assert full.fitted_cov.variance >= 0.0
        assert full.fitted_cov.nugget >= 0.0

    def test_range_recovery(self):
        ranges = []
        for seed in range(8):
            X, y, d = _spatial_data(seed, n=80, spatial_range=2.0)
            fit = ml_fit(X, y, d, fix_nugget=True)
            ranges.append(fit.fitted_cov.spatial_range)
        med = float(np.median(ranges))
        assert 0.8 < med < 5.0

    def test_nugget_share_recovery(self):
        shares = []
        for seed in range(8):
            X, y, d = _spatial_data(seed, n=80, nugget_share=0.5)
            fit = ml_fit(X, y, d)
            total = fit.fitted_cov.variance + fit.fitted_cov.nugget
            shares.append(fit.fitted_cov.nugget / total)
        med = float(np.median(shares))
        assert 0.1 < med < 0.9

    def test_deterministic(self):
        X, y, d = _spatial_data(4)
        a = ml_fit(X, y, d)
        b = ml_fit(X, y, d)
        np.testing.assert_array_equal(a.coef, b.coef)
        assert a.fitted_cov == b.fitted_cov

    def test_exact_linear_response_rejected(self):
        _, _, d = _spatial_data(1, n=3)
        with pytest.raises(DegenerateFitError):
            ml_fit(TOY_X, TOY_X @ np.array([0.5, 2.0]), d)

    def test_distance_shape_checked(self):
        X, y, d = _spatial_data(2, n=10)
        with pytest.raises(InvalidArgumentError):
            ml_fit(X[:9], y[:9], d)

    def test_bad_family_rejected(self):
        X, y, d = _spatial_data(3, n=10)
        with pytest.raises(InvalidArgumentError):
            ml_fit(X, y, d, family="gaussian")

    def test_json_serialization(self):
        X, y, d = _spatial_data(5, n=30)
        fit = ml_fit(X, y, d)
        payload = json.loads(fit.to_json())
        assert payload["method"] == "ml"
        assert payload["fitted_cov"]["family"] == "exponential"
        assert payload["coef"] == [float(v) for v in fit.coef]
        assert payload["n_obs"] == 30


def test_convergence_error_carries_best():
    sentinel = object()
    err = ConvergenceError("stalled", best=sentinel)
    assert err.best is sentinel
    assert ConvergenceError("stalled").best is None
