"""Data-generating processes for the simulation studies.

A :class:`ModelSpec` names which terms enter the outcome equation

    Y = b0 + b_treat A + b_lag (W_t A) + b_conf U + b_conf_lag (W_c U) + e

and carries the pieces needed to realize them on a set of locations:
the treatment field's latent covariance and kind, an optional
treatment/confounder pair (Gaussian with shared latent structure, or
the Poisson convolution), weight-matrix configurations for the two
lags, and the error covariance.  ``generate`` realizes everything in a
fixed draw order from one stream, so a seed pins the whole dataset.

Count and binary fields with confounding get their cross-correlation
through the shared latent Gaussian pair; the observable fields are the
transformed latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import InvalidArgumentError
from .geocore import (
    FIELD_KINDS,
    CovarianceSpec,
    DistanceMatrix,
    GaussianPairSpec,
    LocationSet,
    PoissonPairSpec,
    as_rng,
    distance_matrix,
    gp_draws,
    sample_gaussian_pair,
    sample_poisson_pair,
)
from .weights import WeightMatrix, apply_weights, distance_weights, knn_weights, row_standardize

TERM_INTERCEPT = "intercept"
TERM_TREATMENT = "treatment"
TERM_INTERFERENCE = "interference"
TERM_DIRECT = "direct-confounder"
TERM_INDIRECT = "indirect-confounder"

# Canonical column order for design matrices.
TERM_ORDER = (TERM_INTERCEPT, TERM_TREATMENT, TERM_INTERFERENCE, TERM_DIRECT, TERM_INDIRECT)

# Generator term sets of the six canonical outcome models.
MODEL_TERMS = {
    "m1": frozenset({TERM_TREATMENT}),
    "m2": frozenset({TERM_TREATMENT, TERM_INTERFERENCE}),
    "m3": frozenset({TERM_TREATMENT, TERM_INTERFERENCE, TERM_DIRECT}),
    "m4": frozenset({TERM_TREATMENT, TERM_DIRECT}),
    "m5": frozenset({TERM_TREATMENT, TERM_DIRECT, TERM_INDIRECT}),
    "m6": frozenset({TERM_TREATMENT, TERM_INTERFERENCE, TERM_DIRECT, TERM_INDIRECT}),
}

_DATASET_COLUMNS = ("x", "y", "Y", "A", "Atilde", "U", "Utilde")


@dataclass(frozen=True)
class WeightConfig:
    """Recipe for building a weight matrix on realized locations."""

    scheme: str  # "knn" or "distance"
    k: int = 4
    percentile: float = 0.95
    standardized: bool = True

    def __post_init__(self):
        if self.scheme not in ("knn", "distance"):
            raise InvalidArgumentError(f"unknown weight scheme {self.scheme!r}")

    def build(self, d: DistanceMatrix) -> WeightMatrix:
        if self.scheme == "knn":
            return knn_weights(d, self.k)
        w = distance_weights(d, self.percentile)
        return row_standardize(w) if self.standardized else w

    @property
    def label(self) -> str:
        if self.scheme == "knn":
            return f"knn{self.k}"
        return f"dist{round(100 * self.percentile):d}"


@dataclass(frozen=True)
class ModelSpec:
    """Generator specification for one outcome model."""

    terms: frozenset
    effect_treat: float
    effect_intercept: float = 0.0
    effect_treat_lag: float = 0.0
    effect_conf: float = 0.0
    effect_conf_lag: float = 0.0
    treatment_kind: str = "normal"
    confounder_kind: str = "normal"
    treatment_mean: float = 0.0
    treatment_cov: CovarianceSpec = CovarianceSpec("exponential", 1.0)
    pair: GaussianPairSpec | PoissonPairSpec | None = None
    error: CovarianceSpec = CovarianceSpec("identity", variance=1.0)
    weight_treat: WeightConfig | None = None
    weight_conf: WeightConfig | None = None

    def __post_init__(self):
        terms = frozenset(self.terms)
        object.__setattr__(self, "terms", terms)
        unknown = terms - set(TERM_ORDER)
        if unknown:
            raise InvalidArgumentError(f"unknown model terms: {sorted(unknown)}")
        if TERM_TREATMENT not in terms:
            raise InvalidArgumentError("every model must include the treatment term")
        if TERM_INTERFERENCE in terms and self.weight_treat is None:
            raise InvalidArgumentError("interference requires a treatment weight config")
        if TERM_INDIRECT in terms and self.weight_conf is None:
            raise InvalidArgumentError("an indirect confounder requires a confounder weight config")
        if (TERM_DIRECT in terms or TERM_INDIRECT in terms) and self.pair is None:
            raise InvalidArgumentError("confounder terms require a treatment/confounder pair spec")
        if self.treatment_kind not in FIELD_KINDS or self.confounder_kind not in FIELD_KINDS:
            raise InvalidArgumentError("treatment and confounder kinds must be one of "
                                       + repr(FIELD_KINDS))
        if isinstance(self.pair, PoissonPairSpec) and self.treatment_kind != "poisson":
            raise InvalidArgumentError("a Poisson pair requires a poisson treatment kind")

    @property
    def has_confounder(self) -> bool:
        return TERM_DIRECT in self.terms or TERM_INDIRECT in self.terms


def model_spec(name: str, **kwargs) -> ModelSpec:
    """Build one of the canonical models m1..m6 with keyword overrides."""
    key = name.lower()
    if key not in MODEL_TERMS:
        raise InvalidArgumentError(f"unknown model name {name!r}; expected m1..m6")
    return ModelSpec(terms=MODEL_TERMS[key], **kwargs)


@dataclass
class DataSet:
    """One realized dataset plus the pieces that built it."""

    loc: LocationSet
    outcome: np.ndarray
    treatment: np.ndarray
    noise: np.ndarray | None = None
    treatment_lag: np.ndarray | None = None
    confounder: np.ndarray | None = None
    confounder_lag: np.ndarray | None = None
    spec: ModelSpec | None = None
    treat_weights: WeightMatrix | None = None
    conf_weights: WeightMatrix | None = None
    ingest_report: dict | None = None

    def __post_init__(self):
        n = len(self.loc)
        for name in ("outcome", "treatment", "noise", "treatment_lag",
                     "confounder", "confounder_lag"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).reshape(-1)
            if v.size != n:
                raise InvalidArgumentError(f"{name} length {v.size} does not match {n} locations")
            setattr(self, name, v)

    def __len__(self) -> int:
        return len(self.loc)


def _transform_latent(latent: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "normal":
        return latent
    if kind == "poisson":
        return rng.poisson(np.exp(latent)).astype(float)
    return (latent > 0.0).astype(float)


def generate(spec: ModelSpec, loc: LocationSet, seed=None) -> DataSet:
    """Realize a dataset on the given locations.

    Draw order is fixed (treatment and confounder fields first, error
    last) so one seed reproduces the dataset exactly.  The outcome is
    assembled term by term; by construction
    ``Y - b0 - b_treat A - b_lag At - b_conf U - b_conf_lag Ut - e = 0``.
    """
    rng = as_rng(seed)
    d = distance_matrix(loc)
    n = len(loc)

    confounder = None
    if spec.has_confounder:
        if isinstance(spec.pair, PoissonPairSpec):
            treatment, confounder = sample_poisson_pair(spec.pair, n, rng)
        else:
            latent_a, latent_u = sample_gaussian_pair(spec.pair, d, rng)
            treatment = _transform_latent(latent_a, spec.treatment_kind, rng)
            confounder = _transform_latent(latent_u, spec.confounder_kind, rng)
    else:
        latent = gp_draws(spec.treatment_mean, spec.treatment_cov.covariance(d), rng, 1)[0]
        treatment = _transform_latent(latent, spec.treatment_kind, rng)

    treat_w = conf_w = None
    treatment_lag = confounder_lag = None
    if TERM_INTERFERENCE in spec.terms:
        treat_w = spec.weight_treat.build(d)
        treatment_lag = apply_weights(treat_w, treatment)
    if TERM_INDIRECT in spec.terms:
        conf_w = spec.weight_conf.build(d)
        confounder_lag = apply_weights(conf_w, confounder)

    noise = gp_draws(0.0, spec.error.covariance(d), rng, 1)[0]

    outcome = spec.effect_intercept + spec.effect_treat * treatment + noise
    if treatment_lag is not None:
        outcome = outcome + spec.effect_treat_lag * treatment_lag
    if confounder is not None and TERM_DIRECT in spec.terms:
        outcome = outcome + spec.effect_conf * confounder
    if confounder_lag is not None:
        outcome = outcome + spec.effect_conf_lag * confounder_lag

    return DataSet(
        loc=loc,
        outcome=outcome,
        treatment=treatment,
        noise=noise,
        treatment_lag=treatment_lag,
        confounder=confounder,
        confounder_lag=confounder_lag,
        spec=spec,
        treat_weights=treat_w,
        conf_weights=conf_w,
    )


def ensure_lags(data: DataSet, treat_weights: WeightMatrix | None = None,
                conf_weights: WeightMatrix | None = None) -> DataSet:
    """Fill missing lag columns from the given weight matrices.

    Lags already present are kept; a missing lag with no matrix to
    build it from stays absent.
    """
    treatment_lag = data.treatment_lag
    confounder_lag = data.confounder_lag
    tw, cw = data.treat_weights, data.conf_weights
    if treatment_lag is None and treat_weights is not None:
        treatment_lag = apply_weights(treat_weights, data.treatment)
        tw = treat_weights
    if confounder_lag is None and conf_weights is not None and data.confounder is not None:
        confounder_lag = apply_weights(conf_weights, data.confounder)
        cw = conf_weights
    return DataSet(
        loc=data.loc,
        outcome=data.outcome,
        treatment=data.treatment,
        noise=data.noise,
        treatment_lag=treatment_lag,
        confounder=data.confounder,
        confounder_lag=confounder_lag,
        spec=data.spec,
        treat_weights=tw,
        conf_weights=cw,
        ingest_report=data.ingest_report,
    )


def design_matrix(data: DataSet, terms, center: bool = False
                  ) -> tuple[np.ndarray, tuple[str, ...]]:
    """Design matrix with columns in canonical term order.

    Args:
        data: the dataset supplying the columns.
        terms: iterable of term names to include.
        center: subtract the mean of every non-intercept column.

    Raises:
        InvalidArgumentError: for unknown terms or terms whose column
            is absent from the dataset.
    """
    requested = set(terms)
    unknown = requested - set(TERM_ORDER)
    if unknown:
        raise InvalidArgumentError(f"unknown design terms: {sorted(unknown)}")
    sources = {
        TERM_INTERCEPT: np.ones(len(data)),
        TERM_TREATMENT: data.treatment,
        TERM_INTERFERENCE: data.treatment_lag,
        TERM_DIRECT: data.confounder,
        TERM_INDIRECT: data.confounder_lag,
    }
    cols = []
    names = []
    for term in TERM_ORDER:
        if term not in requested:
            continue
        col = sources[term]
        if col is None:
            raise InvalidArgumentError(f"dataset has no column for term {term!r}")
        col = np.asarray(col, dtype=float)
        if center and term != TERM_INTERCEPT:
            col = col - col.mean()
        cols.append(col)
        names.append(term)
    if not cols:
        raise InvalidArgumentError("design matrix needs at least one term")
    return np.column_stack(cols), tuple(names)


def write_dataset_csv(data: DataSet, path) -> None:
    """Write the dataset in the fixed x,y,Y,A,Atilde,U,Utilde layout."""
    n = len(data)
    nan = np.full(n, np.nan)
    frame = pd.DataFrame({
        "x": data.loc.points[:, 0],
        "y": data.loc.points[:, 1],
        "Y": data.outcome,
        "A": data.treatment,
        "Atilde": data.treatment_lag if data.treatment_lag is not None else nan,
        "U": data.confounder if data.confounder is not None else nan,
        "Utilde": data.confounder_lag if data.confounder_lag is not None else nan,
    })
    frame.to_csv(path, index=False, float_format="%.17g")


def read_dataset_csv(path) -> DataSet:
    """Read a dataset written by :func:`write_dataset_csv`."""
    frame = pd.read_csv(path)
    missing = [c for c in _DATASET_COLUMNS if c not in frame.columns]
    if missing:
        from .errors import SchemaError

        raise SchemaError(f"dataset file is missing columns: {', '.join(missing)}")

    def col(name):
        v = frame[name].to_numpy(dtype=float)
        return None if np.all(np.isnan(v)) else v

    pts = np.column_stack([frame["x"].to_numpy(dtype=float), frame["y"].to_numpy(dtype=float)])
    bounds = (float(pts[:, 0].min()), float(pts[:, 0].max()),
              float(pts[:, 1].min()), float(pts[:, 1].max()))
    loc = LocationSet(points=pts, bounds=bounds)
    return DataSet(
        loc=loc,
        outcome=frame["Y"].to_numpy(dtype=float),
        treatment=frame["A"].to_numpy(dtype=float),
        treatment_lag=col("Atilde"),
        confounder=col("U"),
        confounder_lag=col("Utilde"),
    )
