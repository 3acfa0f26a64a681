"""Factor-and-solve helpers used everywhere a covariance appears.

All quadratic forms in the package go through these routines; nothing
ever forms an explicit matrix inverse.  Near-singular covariances get a
diagonal jitter ladder: start at 1e-8 times the marginal variance and
escalate tenfold up to 1e-4 before giving up.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import NumericalError

# Relative jitter ladder applied to the diagonal when a Cholesky fails.
JITTER_START = 1e-8
JITTER_STOP = 1e-4

# Above this condition number a matrix is reported as ill-conditioned.
CONDITION_LIMIT = 1e10


def cholesky_psd(matrix: np.ndarray, scale: float | None = None) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with escalating diagonal jitter.

    Args:
        matrix: symmetric positive (semi)definite array, shape (n, n).
        scale: reference variance for the jitter ladder; defaults to the
            largest diagonal entry.

    Returns:
        (L, jitter) where ``L @ L.T`` reproduces ``matrix`` plus
        ``jitter`` times the identity, and jitter is 0.0 when no help
        was needed.

    Raises:
        NumericalError: if the factorization still fails at the top of
            the ladder.
    """
    m = np.asarray(matrix, dtype=float)
    if scale is None:
        scale = float(np.max(np.diag(m))) if m.size else 0.0
    try:
        return np.linalg.cholesky(m), 0.0
    except np.linalg.LinAlgError:
        pass
    if scale <= 0.0:
        raise NumericalError(
            "cholesky failed and the matrix has no positive diagonal to scale a jitter from"
        )
    jitter = JITTER_START * scale
    eye = np.eye(m.shape[0])
    while jitter <= JITTER_STOP * scale * (1.0 + 1e-12):
        try:
            return np.linalg.cholesky(m + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    eigs = np.linalg.eigvalsh(m)
    raise NumericalError(
        "cholesky failed after jitter up to "
        f"{JITTER_STOP * scale:.3e}; smallest eigenvalue {eigs[0]:.3e}"
    )


def spd_factor(matrix: np.ndarray):
    """Factor a symmetric positive definite matrix for repeated solves."""
    m = np.asarray(matrix, dtype=float)
    try:
        return cho_factor(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        L, _ = cholesky_psd(m)
        return (L, True)


def spd_solve(factor, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given a factor from :func:`spd_factor`."""
    return cho_solve(factor, b, check_finite=False)


def whiten(factor, b: np.ndarray) -> np.ndarray:
    """Apply ``L^{-1}`` to ``b`` where ``A = L L^T`` was factored.

    Whitened vectors turn generalized least squares into ordinary least
    squares without ever inverting the covariance.
    """
    L = factor[0]
    return solve_triangular(L, b, lower=True, check_finite=False)


def log_det(factor) -> float:
    """Log determinant of the factored matrix."""
    L = factor[0]
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def right_divide(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """Compute ``numerator @ denominator^{-1}`` for symmetric denominator.

    Implemented as a transposed solve so no inverse is materialized.
    """
    factor = spd_factor(denominator)
    return spd_solve(factor, np.asarray(numerator, dtype=float).T).T


def warn_if_ill_conditioned(matrix: np.ndarray, name: str) -> float:
    """Report the condition number, warning when it exceeds the limit."""
    cond = float(np.linalg.cond(matrix))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        warnings.warn(
            f"{name} is ill-conditioned (condition number {cond:.3e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return cond
