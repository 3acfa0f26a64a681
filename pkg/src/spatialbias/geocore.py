"""Locations, spatial covariances and Gaussian/Poisson field samplers.

This module owns the geometry layer: uniform location sampling on a
rectangle, Euclidean (and great-circle) distance matrices, exponential
and Matern correlation functions, and the samplers every generator in
the package builds on.  Fields are drawn by Cholesky factorization:
``X = mean + L z`` with ``L L^T`` the covariance and ``z`` standard
normal.

Conventions fixed here and relied on elsewhere:

* The exponential correlation is ``exp(-d / range)``.
* The Matern family is parameterized with argument ``2 sqrt(v) d / range``
  and supports the half-integer smoothness values 0.5, 1.5 and 2.5,
  evaluated in closed form.
* Count fields use a log link: rates are ``exp(latent)`` so a latent
  mean ``c0`` gives marginal rate ``exp(c0)`` when the latent variance
  is zero.
* Binary fields threshold the latent field strictly above zero (the
  median of a zero-mean latent), so a degenerate latent of zeros maps
  to all zeros.

Both link and threshold are module constants so a study can swap them
without touching the samplers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError, NumericalError
from .linalg import cholesky_psd

# Treatment/confounder field kinds understood by the samplers.
FIELD_KINDS = ("normal", "poisson", "binary")

# Survey rectangle used throughout the simulation studies.
PAPER_BOUNDS = (0.0, 10.0, 0.0, 10.0)

# Latent-threshold rule for binary fields: strictly above this value.
BINARY_THRESHOLD = 0.0

# Link for count fields: rate = COUNT_LINK(latent).
COUNT_LINK = np.exp

_MATERN_SMOOTHNESS = (0.5, 1.5, 2.5)
_EARTH_RADIUS_KM = 6371.0088


def as_rng(seed) -> np.random.Generator:
    """Coerce ``seed`` (int, SeedSequence, Generator, ...) to a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def replicate_rng(base_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for replicate ``index`` of a run.

    Uses Philox keyed on ``(base_seed, index)`` so replicates are
    independent and order-free: replicate 17 draws the same numbers
    whether it runs first, last or alone.
    """
    if index < 0:
        raise InvalidArgumentError("replicate index must be nonnegative")
    key = np.array([base_seed % (2**64), index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class LocationSet:
    """Point locations in a planar rectangle.

    Attributes:
        points: array of shape (n, 2) holding x, y coordinates.
        bounds: (xmin, xmax, ymin, ymax) rectangle the points live in.
    """

    points: np.ndarray
    bounds: tuple[float, float, float, float] = PAPER_BOUNDS

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidArgumentError("points must have shape (n, 2)")
        if pts.shape[0] < 2:
            raise InvalidArgumentError("need at least two locations")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("locations must be finite")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class DistanceMatrix:
    """Symmetric pairwise distances with a zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.values, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise InvalidArgumentError("distance matrix must be square")
        if not np.allclose(np.diag(d), 0.0):
            raise InvalidArgumentError("distance matrix diagonal must be zero")
        if np.any(d < 0):
            raise InvalidArgumentError("distances must be nonnegative")
        self.values = d

    def __len__(self) -> int:
        return self.values.shape[0]

    def offdiag(self) -> np.ndarray:
        """Upper-triangle distances, each unordered pair once."""
        iu = np.triu_indices(len(self), k=1)
        return self.values[iu]


@dataclass(frozen=True)
class CovarianceSpec:
    """Stationary covariance: ``variance * corr(d) + nugget * I``.

    Attributes:
        family: "exponential", "matern" or "identity".  The identity
            family ignores distance entirely (iid errors).
        spatial_range: range parameter of the correlation, > 0 for the
            spatial families.
        smoothness: Matern smoothness, one of 0.5, 1.5, 2.5.
        variance: marginal variance of the spatial component (>= 0).
        nugget: iid variance added on the diagonal (>= 0).
    """

    family: str
    spatial_range: float = 1.0
    smoothness: float = 0.5
    variance: float = 1.0
    nugget: float = 0.0

    def __post_init__(self):
        if self.family not in ("exponential", "matern", "identity"):
            raise InvalidArgumentError(f"unknown covariance family {self.family!r}")
        if self.family != "identity" and not self.spatial_range > 0:
            raise InvalidArgumentError("spatial_range must be positive")
        if self.family == "matern" and self.smoothness not in _MATERN_SMOOTHNESS:
            raise InvalidArgumentError(
                "matern smoothness must be one of " + repr(_MATERN_SMOOTHNESS)
            )
        if self.variance < 0 or self.nugget < 0:
            raise InvalidArgumentError("variance and nugget must be nonnegative")

    def correlation(self, d: np.ndarray) -> np.ndarray:
        """Correlation at the given distances (1.0 at distance zero)."""
        d = np.asarray(d, dtype=float)
        if self.family == "identity":
            return np.where(d == 0.0, 1.0, 0.0)
        if self.family == "exponential":
            return np.exp(-d / self.spatial_range)
        x = 2.0 * np.sqrt(self.smoothness) * d / self.spatial_range
        if self.smoothness == 0.5:
            return np.exp(-x)
        if self.smoothness == 1.5:
            return (1.0 + x) * np.exp(-x)
        return (1.0 + x + x * x / 3.0) * np.exp(-x)

    def covariance(self, d: DistanceMatrix | np.ndarray) -> np.ndarray:
        """Full covariance matrix over a distance matrix."""
        dv = d.values if isinstance(d, DistanceMatrix) else np.asarray(d, dtype=float)
        cov = self.variance * self.correlation(dv)
        if self.nugget:
            cov = cov + self.nugget * np.eye(dv.shape[0])
        return cov


@dataclass
class SpatialFieldSample:
    """A realized field along with the kind that produced it."""

    values: np.ndarray
    kind: str = "normal"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in FIELD_KINDS:
            raise InvalidArgumentError(f"unknown field kind {self.kind!r}")


@dataclass(frozen=True)
class GaussianPairSpec:
    """Correlated Gaussian treatment/confounder pair.

    The confounder is ``U ~ N(mean_conf, sd_conf^2 Omega_u)``.  The
    treatment shares a scaled component of U so that
    ``Cov(A, U) = rho * sd_treat * sd_conf * Omega_u`` while keeping a
    unit-free marginal: ``Var(A_i) = sd_treat^2`` and the site-wise
    correlation between the pair equals ``rho``.

    ``corr_treat``/``corr_conf`` contribute only their correlation
    structure (family, range, smoothness); their variance and nugget
    fields are ignored here.
    """

    rho: float
    sd_treat: float
    sd_conf: float
    corr_treat: CovarianceSpec
    corr_conf: CovarianceSpec
    mean_treat: float = 0.0
    mean_conf: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidArgumentError("rho must lie in [-1, 1]")
        if self.sd_treat < 0 or self.sd_conf < 0:
            raise InvalidArgumentError("standard deviations must be nonnegative")

    def joint_covariance(self, d: DistanceMatrix) -> np.ndarray:
        """Stacked 2n x 2n covariance of (treatment, confounder)."""
        omega_a = correlation_matrix(d, self.corr_treat)
        omega_u = correlation_matrix(d, self.corr_conf)
        for name, omega in (("treatment", omega_a), ("confounder", omega_u)):
            try:
                cholesky_psd(omega)
            except NumericalError as exc:
                raise InvalidArgumentError(
                    f"{name} correlation block is not positive semidefinite"
                ) from exc
        r2 = self.rho**2
        cov_aa = self.sd_treat**2 * ((1.0 - r2) * omega_a + r2 * omega_u)
        cov_au = self.rho * self.sd_treat * self.sd_conf * omega_u
        cov_uu = self.sd_conf**2 * omega_u
        top = np.hstack([cov_aa, cov_au])
        bottom = np.hstack([cov_au, cov_uu])
        return np.vstack([top, bottom])


@dataclass(frozen=True)
class PoissonPairSpec:
    """Poisson treatment built by convolution with a Poisson confounder.

    ``U ~ Poisson(rate_shared)`` and ``A = A_own + U`` with
    ``A_own ~ Poisson(rate_own)`` independent of U, so conditionally
    ``U | A = a ~ Binomial(a, rate_shared / (rate_own + rate_shared))``.
    """

    rate_own: float
    rate_shared: float

    def __post_init__(self):
        if not (self.rate_own > 0 and self.rate_shared > 0):
            raise InvalidArgumentError("both Poisson rates must be positive")

    @property
    def shared_fraction(self) -> float:
        """Conditional thinning probability rate_shared / (rate_own + rate_shared)."""
        return self.rate_shared / (self.rate_own + self.rate_shared)


def sample_locations(n: int, bounds=PAPER_BOUNDS, seed=None) -> LocationSet:
    """Draw ``n`` locations uniformly over a rectangle.

    Coincident points are rejected and redrawn, up to 100 retries, so a
    distance matrix over the result is always valid.
    """
    if n < 2:
        raise InvalidArgumentError("need at least two locations")
    xmin, xmax, ymin, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise InvalidArgumentError("bounds must satisfy xmin < xmax and ymin < ymax")
    rng = as_rng(seed)
    for _ in range(100):
        xs = rng.uniform(xmin, xmax, size=n)
        ys = rng.uniform(ymin, ymax, size=n)
        pts = np.column_stack([xs, ys])
        if np.unique(pts, axis=0).shape[0] == n:
            return LocationSet(points=pts, bounds=tuple(bounds))
    raise DegenerateGeometryError("could not draw distinct locations in 100 attempts")


def distance_matrix(loc: LocationSet) -> DistanceMatrix:
    """Euclidean pairwise distances.

    Raises:
        DegenerateGeometryError: if two locations coincide, which would
            make weight construction and correlation matrices singular.
    """
    pts = loc.points
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    n = d.shape[0]
    off = d + np.eye(n)
    if np.any(off == 0.0):
        i, j = np.argwhere((d == 0.0) & ~np.eye(n, dtype=bool))[0]
        raise DegenerateGeometryError(f"locations {i} and {j} coincide")
    return DistanceMatrix(values=d)


def geodesic_distance_matrix(lonlat: np.ndarray) -> DistanceMatrix:
    """Great-circle distances in kilometers from (longitude, latitude) degrees."""
    pts = np.asarray(lonlat, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidArgumentError("lonlat must have shape (n, 2)")
    lon = np.radians(pts[:, 0])
    lat = np.radians(pts[:, 1])
    dlon = lon[:, None] - lon[None, :]
    dlat = lat[:, None] - lat[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    h = np.clip(h, 0.0, 1.0)
    d = 2.0 * _EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))
    np.fill_diagonal(d, 0.0)
    if np.any((d + np.eye(d.shape[0])) == 0.0):
        raise DegenerateGeometryError("coincident coordinates in geodesic input")
    return DistanceMatrix(values=d)


def correlation_matrix(d: DistanceMatrix, spec: CovarianceSpec) -> np.ndarray:
    """Correlation matrix of a covariance spec over a distance matrix."""
    return spec.correlation(d.values if isinstance(d, DistanceMatrix) else d)


def gp_draws(mean, cov: np.ndarray, rng: np.random.Generator, ndraws: int) -> np.ndarray:
    """Draw ``ndraws`` Gaussian fields; returns shape (ndraws, n).

    A covariance of exact zeros short-circuits to the mean, matching
    the zero-variance limit.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    mean_vec = np.broadcast_to(np.asarray(mean, dtype=float), (n,))
    if not np.any(cov):
        return np.tile(mean_vec, (ndraws, 1))
    L, _ = cholesky_psd(cov)
    z = rng.standard_normal((n, ndraws))
    return (mean_vec[:, None] + L @ z).T


def sample_gp(mean, cov: np.ndarray, seed=None) -> SpatialFieldSample:
    """One Gaussian field draw: ``mean + L z`` with ``L L^T = cov``."""
    rng = as_rng(seed)
    values = gp_draws(mean, cov, rng, 1)[0]
    return SpatialFieldSample(values=values, kind="normal")


def sample_field(kind: str, mean, cov: np.ndarray, seed=None,
                 threshold: float = BINARY_THRESHOLD) -> SpatialFieldSample:
    """Draw a field of the requested kind from a latent Gaussian.

    normal: the latent field itself.
    poisson: counts with rate ``exp(latent)``; a latent mean c0 with
        zero variance yields iid Poisson(exp(c0)).
    binary: indicator that the latent field strictly exceeds the
        threshold (default 0, the median of a zero-mean latent).
    """
    if kind not in FIELD_KINDS:
        raise InvalidArgumentError(f"unknown field kind {kind!r}")
    rng = as_rng(seed)
    latent = gp_draws(mean, cov, rng, 1)[0]
    if kind == "normal":
        return SpatialFieldSample(values=latent, kind="normal")
    if kind == "poisson":
        rate = COUNT_LINK(latent)
        return SpatialFieldSample(values=rng.poisson(rate).astype(float), kind="poisson")
    return SpatialFieldSample(values=(latent > threshold).astype(float), kind="binary")


def sample_gaussian_pair(spec: GaussianPairSpec, d: DistanceMatrix, seed=None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Sample a correlated (treatment, confounder) pair of Gaussian fields.

    Implemented as a single Cholesky of the stacked 2n x 2n joint
    covariance so the cross-covariance is exact by construction.
    """
    rng = as_rng(seed)
    n = len(d)
    joint = spec.joint_covariance(d)
    L, _ = cholesky_psd(joint)
    z = rng.standard_normal(2 * n)
    draw = L @ z
    treat = spec.mean_treat + draw[:n]
    conf = spec.mean_conf + draw[n:]
    return treat, conf


def sample_poisson_pair(spec: PoissonPairSpec, n: int, seed=None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Sample iid (treatment, confounder) Poisson pairs of length ``n``."""
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    rng = as_rng(seed)
    own = rng.poisson(spec.rate_own, size=n)
    shared = rng.poisson(spec.rate_shared, size=n)
    return (own + shared).astype(float), shared.astype(float)
