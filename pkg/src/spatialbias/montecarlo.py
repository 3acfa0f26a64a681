"""Seeded replicate studies over the simulation grids.

An :class:`ExperimentConfig` pairs a generator with a fitted model and
an estimator; :func:`run_experiment` executes its replicates and folds
them into a :class:`MetricsSummary` of mean bias, RMSE, and coverage.
Replicate seeds come from a counter-based split of the experiment's
base seed, so any sharding of the replicate indices across workers
reproduces the same records.  Scenario-1 style cells also record the
closed-form interference bias evaluated on each replicate's realized
treatment, which is what the correction workflow consumes.

``scenario_grid`` emits the canonical study grids:

* T1/T2: four generate/fit scenarios crossed with two effect-size
  cases, two treatment kinds, and two weight schemes; T1 has iid
  errors and OLS fits, T2 has spatial errors and spatial ML fits.
* T3: treatment/confounder distribution study at three kinds.
* T4: the seven-model disentanglement grid under the full generator.
* B1/B2: neighbor-count and distance-threshold sensitivity sweeps.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bias import si_bias_nonspatial, si_bias_spatial
from .dgp import (
    TERM_DIRECT,
    TERM_INDIRECT,
    TERM_INTERCEPT,
    TERM_INTERFERENCE,
    TERM_ORDER,
    TERM_TREATMENT,
    DataSet,
    ModelSpec,
    WeightConfig,
    design_matrix,
    ensure_lags,
    generate,
)
from .errors import ExperimentError, InvalidArgumentError, SpatialBiasError
from .estimate import FitResult, gls_fit, ml_fit, ols_fit
from .geocore import (
    PAPER_BOUNDS,
    CovarianceSpec,
    GaussianPairSpec,
    distance_matrix,
    gp_draws,
    replicate_rng,
    sample_locations,
)

ESTIMATORS = ("ols", "gls-known", "gls-ml")
TABLES = ("T1", "T2", "T3", "T4", "B1", "B2")

# Replicate index reserved for the shared draw in fixed-treatment mode.
_FIXED_DRAW_INDEX = 2**63 - 1

# Grid building blocks.
_TREAT_RANGE = CovarianceSpec("exponential", 1.0)
_ERROR_IID = CovarianceSpec("identity", variance=1.0)
_ERROR_SPATIAL = CovarianceSpec("exponential", 2.0, variance=1.0)
_CASES = (("case1", 8.0, 2.0), ("case2", 3.0, 9.0))
_KINDS = (("discrete", "binary"), ("continuous", "normal"))
_WEIGHTS = (("knn4", WeightConfig("knn", k=4)),
            ("dist95", WeightConfig("distance", percentile=0.95)))

# Fitted-model menu of the disentanglement study, in table order.
MODEL_MENU = (
    ("T+I", (TERM_INTERCEPT, TERM_TREATMENT, TERM_INTERFERENCE)),
    ("T+DSC", (TERM_INTERCEPT, TERM_TREATMENT, TERM_DIRECT)),
    ("T+ISC", (TERM_INTERCEPT, TERM_TREATMENT, TERM_INDIRECT)),
    ("T+I+DSC", (TERM_INTERCEPT, TERM_TREATMENT, TERM_INTERFERENCE, TERM_DIRECT)),
    ("T+I+ISC", (TERM_INTERCEPT, TERM_TREATMENT, TERM_INTERFERENCE, TERM_INDIRECT)),
    ("T+DSC+ISC", (TERM_INTERCEPT, TERM_TREATMENT, TERM_DIRECT, TERM_INDIRECT)),
    ("T+I+DSC+ISC", (TERM_INTERCEPT, TERM_TREATMENT, TERM_INTERFERENCE,
                     TERM_DIRECT, TERM_INDIRECT)),
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulation cell: generator, fitted model, estimator, seeds."""

    label: str
    generator: ModelSpec
    fitted_terms: tuple[str, ...]
    estimator: str = "ols"
    ml_fix_nugget: bool = False
    scenario: int = 0
    case: str = ""
    kind: str = ""
    weight_label: str = ""
    table: str = ""
    n_locations: int = 100
    bounds: tuple[float, float, float, float] = PAPER_BOUNDS
    replicates: int = 1000
    base_seed: int = 0
    level: float = 0.95
    redraw_treatment: bool = True
    fit_weight_treat: WeightConfig | None = None
    fit_weight_conf: WeightConfig | None = None
    analytic: str | None = None
    known_cov: CovarianceSpec | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise InvalidArgumentError("replicates must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise InvalidArgumentError(f"unknown estimator {self.estimator!r}")
        if not 0.0 < self.level < 1.0:
            raise InvalidArgumentError("confidence level must be inside (0, 1)")
        if self.n_locations < 3:
            raise InvalidArgumentError("need at least 3 locations to fit anything")
        terms = tuple(self.fitted_terms)
        unknown = set(terms) - set(TERM_ORDER)
        if unknown:
            raise InvalidArgumentError(f"unknown fitted terms: {sorted(unknown)}")
        if TERM_TREATMENT not in terms:
            raise InvalidArgumentError("the fitted model must include the treatment")
        object.__setattr__(self, "fitted_terms", terms)
        if self.analytic not in (None, "si"):
            raise InvalidArgumentError(f"unknown analytic formula tag {self.analytic!r}")
        self._check_scenario(terms)

    def _check_scenario(self, terms):
        # Scenario 1 generates with interference and omits it in the fit;
        # 2 keeps it in both; 3 in neither; 4 only in the fit.
        if self.scenario == 0:
            return
        if self.scenario not in (1, 2, 3, 4):
            raise InvalidArgumentError("scenario must be 0 (free-form) or 1..4")
        gen_has = TERM_INTERFERENCE in self.generator.terms
        fit_has = TERM_INTERFERENCE in terms
        want_gen, want_fit = {
            1: (True, False),
            2: (True, True),
            3: (False, False),
            4: (False, True),
        }[self.scenario]
        if gen_has != want_gen or fit_has != want_fit:
            raise InvalidArgumentError(
                f"scenario {self.scenario} requires generator"
                f"{' with' if want_gen else ' without'} interference and a fit"
                f"{' with' if want_fit else ' without'} it"
            )

    @property
    def truth(self) -> float:
        return self.generator.effect_treat


@dataclass(frozen=True)
class ReplicateRecord:
    """Outcome of a single replicate."""

    index: int
    estimate: float = float("nan")
    se: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    analytic_bias: float = float("nan")
    failed: bool = False
    message: str = ""


@dataclass
class MetricsSummary:
    """Aggregated metrics of one experiment cell."""

    config: ExperimentConfig
    records: tuple[ReplicateRecord, ...]
    n_replicates: int
    n_failed: int
    mean_estimate: float
    mean_bias: float
    rmse: float
    coverage: float
    mc_se: float
    mean_analytic_bias: float | None

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise InvalidArgumentError("coverage must lie in [0, 1]")
        if self.rmse + 1e-12 < abs(self.mean_bias):
            raise InvalidArgumentError("rmse cannot be smaller than |mean bias|")
        if self.n_replicates + self.n_failed != len(self.records):
            raise InvalidArgumentError("record counts do not add up")

    def row(self) -> dict:
        """Flat representation used by the table emitters."""
        c = self.config
        return {
            "table": c.table,
            "cell": c.label,
            "kind": c.kind,
            "case": c.case,
            "scenario": c.scenario,
            "weights": c.weight_label,
            "estimator": c.estimator,
            "replicates": self.n_replicates,
            "failures": self.n_failed,
            "truth": c.truth,
            "mean_estimate": self.mean_estimate,
            "mean_bias": self.mean_bias,
            "rmse": self.rmse,
            "coverage": self.coverage,
            "mc_se": self.mc_se,
            "mean_analytic_bias": self.mean_analytic_bias,
        }


def rmse(estimates, truth: float) -> float:
    """Root of sample variance plus squared mean bias.

    Uses the N-1 variance divisor, so this is not simply the root mean
    squared deviation from the truth.
    """
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size < 2:
        raise InvalidArgumentError("rmse needs at least 2 estimates")
    bias_sq = (float(estimates.mean()) - truth) ** 2
    return float(np.sqrt(estimates.var(ddof=1) + bias_sq))


def coverage(intervals, truth: float) -> float:
    """Fraction of closed intervals containing the truth."""
    arr = np.asarray(intervals, dtype=float)
    if arr.size == 0:
        raise InvalidArgumentError("coverage needs at least one interval")
    arr = arr.reshape(-1, 2)
    return float(np.mean((arr[:, 0] <= truth) & (truth <= arr[:, 1])))


def _fit_weights(cfg: ExperimentConfig):
    treat = cfg.fit_weight_treat or cfg.generator.weight_treat
    conf = cfg.fit_weight_conf or cfg.generator.weight_conf
    return treat, conf


def _fixed_data(cfg: ExperimentConfig) -> DataSet:
    """The shared draw for fixed-treatment mode, pinned by base_seed alone."""
    rng = replicate_rng(cfg.base_seed, _FIXED_DRAW_INDEX)
    loc = sample_locations(cfg.n_locations, cfg.bounds, rng)
    return generate(cfg.generator, loc, rng)


def run_replicate(cfg: ExperimentConfig, index: int,
                  fixed: DataSet | None = None) -> ReplicateRecord:
    """Generate, fit, and record one replicate.

    Fit failures come back as flagged records rather than exceptions so
    an experiment can account for them.  ``fixed`` supplies the shared
    dataset in fixed-treatment mode; only the error is redrawn then.
    """
    rng = replicate_rng(cfg.base_seed, index)
    if cfg.redraw_treatment:
        loc = sample_locations(cfg.n_locations, cfg.bounds, rng)
        data = generate(cfg.generator, loc, rng)
    else:
        # Redraw only the error; the systematic part is the fixed outcome
        # minus its noise.
        base = fixed if fixed is not None else _fixed_data(cfg)
        d0 = distance_matrix(base.loc)
        fresh = gp_draws(0.0, cfg.generator.error.covariance(d0.values), rng, 1)[0]
        data = DataSet(
            loc=base.loc,
            outcome=base.outcome - base.noise + fresh,
            treatment=base.treatment,
            noise=fresh,
            treatment_lag=base.treatment_lag,
            confounder=base.confounder,
            confounder_lag=base.confounder_lag,
            spec=base.spec,
            treat_weights=base.treat_weights,
            conf_weights=base.conf_weights,
        )
        loc = base.loc
    d = distance_matrix(loc)

    w_treat_cfg, w_conf_cfg = _fit_weights(cfg)
    need_treat_lag = TERM_INTERFERENCE in cfg.fitted_terms and data.treatment_lag is None
    need_conf_lag = TERM_INDIRECT in cfg.fitted_terms and data.confounder_lag is None
    data = ensure_lags(
        data,
        w_treat_cfg.build(d) if need_treat_lag and w_treat_cfg else None,
        w_conf_cfg.build(d) if need_conf_lag and w_conf_cfg else None,
    )

    X, names = design_matrix(data, cfg.fitted_terms)
    try:
        fit = _run_fit(cfg, X, data.outcome, d, names)
    except SpatialBiasError as exc:
        return ReplicateRecord(index=index, failed=True, message=str(exc))

    analytic = float("nan")
    if cfg.analytic == "si":
        analytic = _si_analytic(cfg, data, d, fit)

    lo, hi = fit.interval(TERM_TREATMENT)
    return ReplicateRecord(
        index=index,
        estimate=fit.coefficient(TERM_TREATMENT),
        se=float(fit.se[fit.names.index(TERM_TREATMENT)]),
        ci_low=lo,
        ci_high=hi,
        analytic_bias=analytic,
    )


def _run_fit(cfg: ExperimentConfig, X, y, d, names) -> FitResult:
    if cfg.estimator == "ols":
        return ols_fit(X, y, names, level=cfg.level)
    if cfg.estimator == "gls-known":
        spec = cfg.known_cov or cfg.generator.error
        return gls_fit(X, y, spec.covariance(d.values), names, level=cfg.level)
    return ml_fit(X, y, d, names, level=cfg.level, fix_nugget=cfg.ml_fix_nugget)


def _si_analytic(cfg: ExperimentConfig, data: DataSet, d, fit: FitResult) -> float:
    """Closed-form interference bias on this replicate's treatment.

    Evaluated on the centered treatment because the fits carry an
    intercept; with row-stochastic weights the two are equivalent.
    """
    w = data.treat_weights
    if w is None:
        return float("nan")
    centered = data.treatment - data.treatment.mean()
    effect = cfg.generator.effect_treat_lag
    if cfg.estimator == "ols":
        return si_bias_nonspatial(centered, w, effect)
    if cfg.estimator == "gls-known":
        spec = cfg.known_cov or cfg.generator.error
        return si_bias_spatial(centered, w, spec.covariance(d.values), effect)
    return si_bias_spatial(centered, w, fit.fitted_cov.covariance(d.values), effect)


def _replicate_batch(cfg: ExperimentConfig, indices) -> list[ReplicateRecord]:
    fixed = None if cfg.redraw_treatment else _fixed_data(cfg)
    return [run_replicate(cfg, i, fixed) for i in indices]


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsSummary:
    """Run all replicates of a cell and aggregate them.

    The aggregate is a pure fold over records sorted by replicate
    index, so worker count and chunking cannot change the summary.

    Raises:
        ExperimentError: when more than 5% of replicates fail.
    """
    indices = range(cfg.replicates)
    if workers <= 1:
        records = _replicate_batch(cfg, indices)
    else:
        chunks = np.array_split(np.asarray(indices), workers * 4)
        chunks = [c.tolist() for c in chunks if c.size]
        records = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_replicate_batch, [cfg] * len(chunks), chunks):
                records.extend(batch)
    records.sort(key=lambda r: r.index)
    records = tuple(records)

    ok = [r for r in records if not r.failed]
    n_failed = len(records) - len(ok)
    if n_failed > 0.05 * cfg.replicates:
        raise ExperimentError(
            f"{n_failed} of {cfg.replicates} replicates failed in {cfg.label}; "
            "the summary would be unreliable"
        )
    if len(ok) < 2:
        raise ExperimentError(f"cell {cfg.label} has fewer than 2 usable replicates")

    estimates = np.array([r.estimate for r in ok])
    intervals = [(r.ci_low, r.ci_high) for r in ok]
    mean_est = float(estimates.mean())
    mean_bias = mean_est - cfg.truth
    analytic_vals = np.array([r.analytic_bias for r in ok])
    has_analytic = cfg.analytic is not None and np.isfinite(analytic_vals).any()
    return MetricsSummary(
        config=cfg,
        records=records,
        n_replicates=len(ok),
        n_failed=n_failed,
        mean_estimate=mean_est,
        mean_bias=mean_bias,
        rmse=rmse(estimates, cfg.truth),
        coverage=coverage(intervals, cfg.truth),
        mc_se=float(estimates.std(ddof=1) / np.sqrt(len(ok))),
        mean_analytic_bias=float(np.nanmean(analytic_vals)) if has_analytic else None,
    )


def cell_seed(base_seed: int, label: str) -> int:
    """Stable per-cell seed: the label hash folded into the base seed."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return (base_seed ^ int.from_bytes(digest[:8], "big")) % 2**63


def _interference_cell(label, table, setting, kind_label, kind, case_label,
                       beta_a, beta_lag, scenario, weight_label, wcfg,
                       replicates, base_seed) -> ExperimentConfig:
    error = _ERROR_IID if setting == "nonspatial" else _ERROR_SPATIAL
    common = dict(treatment_kind=kind, treatment_cov=_TREAT_RANGE, error=error)
    if scenario in (1, 2):
        gen = ModelSpec(
            terms=frozenset({TERM_TREATMENT, TERM_INTERFERENCE}),
            effect_treat=beta_a, effect_treat_lag=beta_lag,
            weight_treat=wcfg, **common,
        )
    else:
        gen = ModelSpec(terms=frozenset({TERM_TREATMENT}),
                        effect_treat=beta_a, **common)
    fitted = (TERM_INTERCEPT, TERM_TREATMENT, TERM_INTERFERENCE) \
        if scenario in (2, 4) else (TERM_INTERCEPT, TERM_TREATMENT)
    spatial = setting == "spatial"
    return ExperimentConfig(
        label=label,
        generator=gen,
        fitted_terms=fitted,
        estimator="gls-ml" if spatial else "ols",
        ml_fix_nugget=True,
        scenario=scenario,
        case=case_label,
        kind=kind_label,
        weight_label=weight_label,
        table=table,
        replicates=replicates,
        base_seed=cell_seed(base_seed, label),
        fit_weight_treat=wcfg,
        analytic="si" if scenario == 1 else None,
    )


def _t12_grid(table, replicates, base_seed):
    setting = "nonspatial" if table == "T1" else "spatial"
    cells = []
    for kind_label, kind in _KINDS:
        for case_label, beta_a, beta_lag in _CASES:
            for scenario in (1, 2, 3, 4):
                for weight_label, wcfg in _WEIGHTS:
                    label = (f"{table}/{kind_label}/{case_label}"
                             f"/s{scenario}/{weight_label}")
                    cells.append(_interference_cell(
                        label, table, setting, kind_label, kind, case_label,
                        beta_a, beta_lag, scenario, weight_label, wcfg,
                        replicates, base_seed))
    return cells


def _t3_grid(replicates, base_seed):
    corr = CovarianceSpec("exponential", 2.0)
    pair = GaussianPairSpec(rho=0.0, sd_treat=1.0, sd_conf=1.0,
                            corr_treat=corr, corr_conf=corr)
    cells = []
    for kind in ("normal", "binary", "poisson"):
        label = f"T3/{kind}-{kind}"
        gen = ModelSpec(
            terms=frozenset({TERM_TREATMENT, TERM_DIRECT}),
            effect_treat=2.0, effect_conf=1.5,
            treatment_kind=kind, confounder_kind=kind,
            pair=pair, error=_ERROR_SPATIAL,
        )
        cells.append(ExperimentConfig(
            label=label,
            generator=gen,
            fitted_terms=(TERM_INTERCEPT, TERM_TREATMENT),
            estimator="gls-ml",
            ml_fix_nugget=True,
            kind=kind,
            table="T3",
            replicates=replicates,
            base_seed=cell_seed(base_seed, label),
        ))
    return cells


def _t4_grid(replicates, base_seed):
    # Latents at range 1 so the spatial fit cannot absorb an omitted
    # interference term; the error keeps its own longer range.
    corr = CovarianceSpec("exponential", 1.0)
    pair = GaussianPairSpec(rho=0.0, sd_treat=1.0, sd_conf=1.0,
                            corr_treat=corr, corr_conf=corr)
    cells = []
    for weight_label, wcfg in _WEIGHTS:
        gen = ModelSpec(
            terms=frozenset({TERM_TREATMENT, TERM_INTERFERENCE,
                             TERM_DIRECT, TERM_INDIRECT}),
            effect_treat=5.0, effect_treat_lag=3.0,
            effect_conf=2.5, effect_conf_lag=2.0,
            pair=pair, error=_ERROR_SPATIAL,
            weight_treat=wcfg, weight_conf=wcfg,
        )
        for model_label, terms in MODEL_MENU:
            label = f"T4/{weight_label}/{model_label}"
            cells.append(ExperimentConfig(
                label=label,
                generator=gen,
                fitted_terms=terms,
                estimator="gls-ml",
                ml_fix_nugget=False,
                case=model_label,
                weight_label=weight_label,
                table="T4",
                replicates=replicates,
                base_seed=cell_seed(base_seed, label),
                fit_weight_treat=wcfg,
                fit_weight_conf=wcfg,
            ))
    return cells


def _sweep_grid(table, replicates, base_seed):
    if table == "B1":
        settings = [(f"k{k}", WeightConfig("knn", k=k)) for k in (1, 2, 3, 5)]
    else:
        settings = [(f"thr{round(100 * p)}", WeightConfig("distance", percentile=p))
                    for p in (0.90, 0.80, 0.75, 0.50)]
    cells = []
    for setting in ("nonspatial", "spatial"):
        for kind_label, kind in _KINDS:
            for case_label, beta_a, beta_lag in _CASES:
                for weight_label, wcfg in settings:
                    label = (f"{table}/{setting}/{kind_label}/{case_label}"
                             f"/{weight_label}")
                    cells.append(_interference_cell(
                        label, table, setting, kind_label, kind, case_label,
                        beta_a, beta_lag, 1, weight_label, wcfg,
                        replicates, base_seed))
    return cells


def scenario_grid(table: str, replicates: int | None = None,
                  base_seed: int = 0) -> list[ExperimentConfig]:
    """The canonical experiment cells of one study table.

    Args:
        table: one of T1, T2, T3, T4, B1, B2.
        replicates: override the table's default replicate count.
        base_seed: folded with each cell label into the cell's seed.
    """
    if table not in TABLES:
        raise InvalidArgumentError(f"unknown table {table!r}; expected one of {TABLES}")
    if table in ("T1", "T2"):
        return _t12_grid(table, replicates or 1000, base_seed)
    if table == "T3":
        return _t3_grid(replicates or 10_000, base_seed)
    if table == "T4":
        return _t4_grid(replicates or 1000, base_seed)
    return _sweep_grid(table, replicates or 500, base_seed)


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


_ROW_FIELDS = ("table", "cell", "kind", "case", "scenario", "weights",
               "estimator", "replicates", "failures", "truth", "mean_estimate",
               "mean_bias", "rmse", "coverage", "mc_se", "mean_analytic_bias")


def render_csv(summaries) -> str:
    """Summaries as CSV text with a fixed column order."""
    lines = [",".join(_ROW_FIELDS)]
    for s in summaries:
        row = s.row()
        lines.append(",".join(_format_value(row[k]) for k in _ROW_FIELDS))
    return "\n".join(lines) + "\n"


def render_json(summaries) -> str:
    rows = [s.row() for s in summaries]
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def render_markdown(summaries) -> str:
    """Summaries as per-table markdown blocks mirroring the study layout."""
    out = []
    current = object()
    for s in summaries:
        row = s.row()
        if row["table"] != current:
            current = row["table"]
            out.append(f"## {current or 'experiments'}")
            out.append("")
            out.append("| cell | bias | rmse | coverage | analytic bias | failures |")
            out.append("| --- | ---: | ---: | ---: | ---: | ---: |")
        analytic = row["mean_analytic_bias"]
        out.append(
            f"| {row['cell']} | {row['mean_bias']:.4f} | {row['rmse']:.4f} "
            f"| {row['coverage']:.3f} "
            f"| {'' if analytic is None else format(analytic, '.4f')} "
            f"| {row['failures']} |"
        )
    return "\n".join(out) + "\n"
