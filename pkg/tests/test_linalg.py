"""Factor-and-solve helpers: jitter ladder, solves, determinants."""

import numpy as np
import pytest

from spatialbias.errors import NumericalError
from spatialbias.linalg import (
    cholesky_psd,
    log_det,
    right_divide,
    spd_factor,
    spd_solve,
    warn_if_ill_conditioned,
    whiten,
)


def spd(n, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestCholeskyPsd:
    def test_clean_matrix_needs_no_jitter(self):
        m = spd(6)
        L, jitter = cholesky_psd(m)
        assert jitter == 0.0
        np.testing.assert_allclose(L @ L.T, m, atol=1e-10)

    def test_singular_psd_gets_jitter(self):
        v = np.arange(1.0, 5.0)
        m = np.outer(v, v)  # rank one
        L, jitter = cholesky_psd(m)
        assert 0.0 < jitter <= 1e-4 * m.diagonal().max()
        np.testing.assert_allclose(
            L @ L.T, m + jitter * np.eye(4), atol=1e-8)

    def test_indefinite_matrix_raises(self):
        m = np.diag([1.0, -1.0])
        with pytest.raises(NumericalError, match="eigenvalue"):
            cholesky_psd(m)

    def test_zero_scale_raises(self):
        with pytest.raises(NumericalError):
            cholesky_psd(np.zeros((3, 3)))


class TestSolves:
    def test_spd_solve_matches_direct(self):
        m = spd(5, seed=1)
        b = np.arange(5.0)
        x = spd_solve(spd_factor(m), b)
        np.testing.assert_allclose(x, np.linalg.solve(m, b), atol=1e-10)

    def test_whiten_reproduces_quadratic_form(self):
        m = spd(5, seed=2)
        b = np.linspace(-1.0, 1.0, 5)
        z = whiten(spd_factor(m), b)
        np.testing.assert_allclose(
            z @ z, b @ np.linalg.solve(m, b), atol=1e-10)

    def test_log_det_matches_slogdet(self):
        m = spd(7, seed=3)
        sign, ref = np.linalg.slogdet(m)
        assert sign == 1.0
        assert log_det(spd_factor(m)) == pytest.approx(ref, abs=1e-10)

    def test_right_divide_matches_inverse(self):
        num = np.random.default_rng(4).standard_normal((3, 5))
        den = spd(5, seed=5)
        np.testing.assert_allclose(
            right_divide(num, den), num @ np.linalg.inv(den), atol=1e-9)


class TestConditionWarning:
    def test_well_conditioned_is_silent(self):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            cond = warn_if_ill_conditioned(np.eye(4), "identity")
        assert cond == pytest.approx(1.0)

    def test_ill_conditioned_warns(self):
        m = np.diag([1.0, 1e-12])
        with pytest.warns(RuntimeWarning, match="ill-conditioned"):
            warn_if_ill_conditioned(m, "nearly singular scale")
