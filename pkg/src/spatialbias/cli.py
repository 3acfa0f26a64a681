"""Command-line surface: ingestion, fitting, experiments, reports.

Subcommands:

* ``simulate``: realize one dataset from a named model and write it.
* ``weights``: build a neighborhood weight matrix for a point CSV.
* ``bias``: evaluate a closed-form bias formula and print its audit.
* ``fit``: fit one outcome model to a dataset CSV.
* ``experiment``: run cells of a study grid and emit result tables.
* ``tables``: run several study grids back to back.
* ``apply``: the seven-model comparison on real point data.

Options resolve in three layers: built-in defaults, then an INI config
file (section per command plus ``[common]``), then explicit flags.
Config values are coerced by shape: ``true``/``false`` to booleans,
integer-looking text to int, decimal-looking text to float.  The
``SPATIALBIAS_OUT`` environment variable sets the default output
directory.  Exit codes: 0 on success, 2 for invalid input of any kind,
3 for numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass

import numpy as np

from .bias import (
    DirectSCParams,
    IndirectSCParams,
    audit_record,
    direct_sc_bias,
    indirect_sc_bias,
    poisson_confounding_bias,
    si_bias_nonspatial,
    si_bias_spatial,
)
from .dgp import (
    MODEL_TERMS,
    TERM_DIRECT,
    TERM_INDIRECT,
    TERM_INTERFERENCE,
    TERM_TREATMENT,
    DataSet,
    WeightConfig,
    design_matrix,
    ensure_lags,
    generate,
    model_spec,
    write_dataset_csv,
)
from .errors import (
    CsvParseError,
    InvalidArgumentError,
    SchemaError,
    SpatialBiasError,
)
from .estimate import gls_fit, ml_fit, ols_fit
from .geocore import (
    CovarianceSpec,
    GaussianPairSpec,
    LocationSet,
    PoissonPairSpec,
    as_rng,
    distance_matrix,
    geodesic_distance_matrix,
    sample_locations,
)
from .montecarlo import (
    MODEL_MENU,
    TABLES,
    MetricsSummary,
    render_csv,
    render_json,
    render_markdown,
    run_experiment,
    scenario_grid,
)
from .weights import apply_weights, write_weight_csv

DEFAULT_COLUMNS = {"x": "x", "y": "y", "outcome": "Y",
                   "treatment": "A", "confounder": "U"}
_MISSING_TOKENS = {"", "na", "nan", "null"}
_CORE_ROLES = ("x", "y", "outcome", "treatment")

OUT_ENV_VAR = "SPATIALBIAS_OUT"


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_cell(cell: str, column: str, rownum: int) -> float:
    text = cell.strip()
    if text.lower() in _MISSING_TOKENS:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise CsvParseError(
            f"row {rownum}: cannot parse {text!r} in column {column!r}",
            row=rownum,
        ) from None
    return value


def read_spatial_csv(path, column_map: dict | None = None) -> DataSet:
    """Read point data with named roles into a dataset.

    ``column_map`` maps the roles x, y, outcome, treatment, and
    optionally confounder to CSV column names; unmapped roles use the
    defaults x, y, Y, A, U.  Rows with a missing core value are dropped
    and counted.  A confounder column that is missing everywhere is
    treated as absent unless it was mapped explicitly.  Duplicate
    coordinates are perturbed by one part in 10^6 (per extra occurrence,
    on the x axis, ties broken by field values) with a warning, so the
    distance matrix stays valid.  The ingest report records row counts.

    Raises:
        SchemaError: a mapped column is absent from the header.
        CsvParseError: a non-missing cell is not numeric; carries the
            1-based file row number (the header is row 1).
    """
    colmap = dict(DEFAULT_COLUMNS)
    explicit_confounder = False
    if column_map:
        unknown = set(column_map) - set(DEFAULT_COLUMNS)
        if unknown:
            raise InvalidArgumentError(f"unknown column roles: {sorted(unknown)}")
        explicit_confounder = "confounder" in column_map
        colmap.update({k: v for k, v in column_map.items() if v})

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        index = {}
        for role in _CORE_ROLES:
            if colmap[role] not in header:
                raise SchemaError(
                    f"{path}: missing column {colmap[role]!r} mapped to role {role!r}"
                )
            index[role] = header.index(colmap[role])
        has_conf = colmap["confounder"] in header
        if explicit_confounder and not has_conf:
            raise SchemaError(
                f"{path}: missing column {colmap['confounder']!r} "
                "mapped to role 'confounder'"
            )
        if has_conf:
            index["confounder"] = header.index(colmap["confounder"])

        parsed = []
        for rownum, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            row = {}
            for role, col in index.items():
                cell = rec[col] if col < len(rec) else ""
                row[role] = _parse_cell(cell, colmap[role], rownum)
            parsed.append(row)

    if not parsed:
        raise SchemaError(f"{path}: no data rows")

    confounder_present = has_conf and any(
        not math.isnan(r["confounder"]) for r in parsed
    )
    kept, dropped = [], 0
    for row in parsed:
        missing_core = any(math.isnan(row[r]) for r in _CORE_ROLES)
        missing_conf = confounder_present and math.isnan(row["confounder"])
        if missing_core or missing_conf:
            dropped += 1
        else:
            kept.append(row)
    if not kept:
        raise SchemaError(f"{path}: every row has missing values")

    x = np.array([r["x"] for r in kept])
    y = np.array([r["y"] for r in kept])
    jittered = _jitter_duplicates(x, y, kept)

    points = np.column_stack([x, y])
    bounds = (float(x.min()), float(x.max()), float(y.min()), float(y.max()))
    loc = LocationSet(points, bounds)
    report = {"rows": len(kept), "dropped_missing": dropped, "jittered": jittered}
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} rows with missing values")
    return DataSet(
        loc=loc,
        outcome=np.array([r["outcome"] for r in kept]),
        treatment=np.array([r["treatment"] for r in kept]),
        confounder=(np.array([r["confounder"] for r in kept])
                    if confounder_present else None),
        ingest_report=report,
    )


def _jitter_duplicates(x: np.ndarray, y: np.ndarray, rows: list[dict]) -> int:
    """Perturb repeated coordinates in place; returns the perturbed count.

    Within a duplicate group rows are ranked by their field values, so
    the same input rows get the same jitter in any file order.
    """
    groups: dict[tuple, list[int]] = {}
    for i, (xi, yi) in enumerate(zip(x, y)):
        groups.setdefault((xi, yi), []).append(i)
    jittered = 0
    for members in groups.values():
        if len(members) < 2:
            continue
        ranked = sorted(members, key=lambda i: (
            rows[i]["outcome"], rows[i]["treatment"],
            rows[i].get("confounder", 0.0), i))
        for occurrence, i in enumerate(ranked[1:], start=1):
            x[i] += 1e-6 * occurrence
            jittered += 1
    if jittered:
        warnings.warn(
            f"perturbed {jittered} duplicate coordinate rows by a 1e-6 jitter"
        )
    return jittered


# ---------------------------------------------------------------------------
# Application pipeline


@dataclass(frozen=True)
class ApplicationRow:
    """One fitted model of the application comparison."""

    scheme: str
    model: str
    estimate: float
    ci_low: float
    ci_high: float
    aic: float
    best: bool = False
    failed: bool = False
    message: str = ""

    def row(self) -> dict:
        return {
            "scheme": self.scheme,
            "model": self.model,
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "aic": self.aic,
            "best": self.best,
            "failed": self.failed,
            "message": self.message,
        }


@dataclass(frozen=True)
class ApplicationTable:
    """Seven-model comparison per weight scheme, in menu order."""

    rows: tuple[ApplicationRow, ...]

    def __post_init__(self):
        menu = [label for label, _ in MODEL_MENU]
        schemes = sorted({r.scheme for r in self.rows})
        for scheme in schemes:
            block = [r for r in self.rows if r.scheme == scheme]
            if [r.model for r in block] != menu:
                raise InvalidArgumentError(
                    f"scheme {scheme!r} must carry exactly the 7 menu models in order"
                )
            for r in block:
                if r.failed:
                    continue
                if not r.ci_low <= r.ci_high:
                    raise InvalidArgumentError("confidence interval endpoints are out of order")
                if not math.isfinite(r.aic):
                    raise InvalidArgumentError("AIC of a successful fit must be finite")

    @property
    def schemes(self) -> tuple[str, ...]:
        seen = []
        for r in self.rows:
            if r.scheme not in seen:
                seen.append(r.scheme)
        return tuple(seen)

    def best_row(self, scheme: str) -> ApplicationRow | None:
        candidates = [r for r in self.rows if r.scheme == scheme and r.best]
        return candidates[0] if candidates else None


def default_application_schemes(k: int = 4, threshold: float = 0.50):
    """Weight schemes of the application comparison: kNN and a distance cutoff."""
    return [
        (f"knn{k}", WeightConfig("knn", k=k)),
        (f"dist{round(100 * threshold)}", WeightConfig("distance", percentile=threshold)),
    ]


def _sorted_for_pipeline(data: DataSet) -> DataSet:
    """Canonical row order so the pipeline ignores input row order."""
    conf = data.confounder if data.confounder is not None else np.zeros(len(data))
    order = np.lexsort((conf, data.treatment, data.outcome,
                        data.loc.points[:, 1], data.loc.points[:, 0]))
    return DataSet(
        loc=LocationSet(data.loc.points[order], data.loc.bounds),
        outcome=data.outcome[order],
        treatment=data.treatment[order],
        confounder=None if data.confounder is None else data.confounder[order],
        ingest_report=data.ingest_report,
    )


def application_pipeline(data: DataSet, weight_schemes=None, fix_nugget: bool = False,
                         geodesic: bool = False, level: float = 0.95) -> ApplicationTable:
    """Fit the seven-model menu per weight scheme and flag the best AIC.

    Both lags use the same matrix per scheme: the treatment lag carries
    the neighborhood treatment, the confounder lag the neighborhood
    confounder.  Fit failures yield flagged rows; the table is emitted
    regardless.  Rows are processed in a canonical sort of the input, so
    shuffling the CSV cannot change the output.
    """
    if data.confounder is None:
        raise InvalidArgumentError(
            "the application comparison needs a confounder column"
        )
    schemes = weight_schemes or default_application_schemes()
    data = _sorted_for_pipeline(data)
    d = (geodesic_distance_matrix(data.loc.points) if geodesic
         else distance_matrix(data.loc))

    rows = []
    for scheme_label, wcfg in schemes:
        w = wcfg.build(d)
        full = DataSet(
            loc=data.loc,
            outcome=data.outcome,
            treatment=data.treatment,
            confounder=data.confounder,
            treatment_lag=apply_weights(w, data.treatment),
            confounder_lag=apply_weights(w, data.confounder),
        )
        block = []
        for model_label, terms in MODEL_MENU:
            X, names = design_matrix(full, terms)
            try:
                fit = ml_fit(X, full.outcome, d, names, level=level,
                             fix_nugget=fix_nugget)
                lo, hi = fit.interval(TERM_TREATMENT)
                block.append(ApplicationRow(
                    scheme=scheme_label,
                    model=model_label,
                    estimate=fit.coefficient(TERM_TREATMENT),
                    ci_low=lo,
                    ci_high=hi,
                    aic=fit.aic,
                ))
            except SpatialBiasError as exc:
                block.append(ApplicationRow(
                    scheme=scheme_label,
                    model=model_label,
                    estimate=math.nan,
                    ci_low=math.nan,
                    ci_high=math.nan,
                    aic=math.nan,
                    failed=True,
                    message=str(exc),
                ))
        ok = [r for r in block if not r.failed]
        if ok:
            best_aic = min(r.aic for r in ok)
            block = [
                r if r.failed else ApplicationRow(
                    **{**r.row(), "best": r.aic == best_aic})
                for r in block
            ]
        rows.extend(block)
    return ApplicationTable(rows=tuple(rows))


# ---------------------------------------------------------------------------
# Table emission


_APP_FIELDS = ("scheme", "model", "estimate", "ci_low", "ci_high",
               "aic", "best", "failed", "message")


def _application_rows(tables) -> list[dict]:
    rows = []
    for t in tables:
        rows.extend(r.row() for r in t.rows)
    return rows


def render_application_csv(tables) -> str:
    lines = [",".join(_APP_FIELDS)]
    for row in _application_rows(tables):
        cells = []
        for k in _APP_FIELDS:
            v = row[k]
            if isinstance(v, bool):
                cells.append(str(v).lower())
            elif isinstance(v, float):
                cells.append("" if math.isnan(v) else f"{v:.6g}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def render_application_json(tables) -> str:
    rows = _application_rows(tables)
    for row in rows:
        for k, v in row.items():
            if isinstance(v, float) and math.isnan(v):
                row[k] = None
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def render_application_markdown(tables) -> str:
    out = []
    for t in tables:
        for scheme in t.schemes:
            out.append(f"## application ({scheme})")
            out.append("")
            out.append("| model | estimate | 95% CI | AIC | best |")
            out.append("| --- | ---: | :---: | ---: | :---: |")
            for r in t.rows:
                if r.scheme != scheme:
                    continue
                if r.failed:
                    out.append(f"| {r.model} | failed | - | - |  |")
                    continue
                out.append(
                    f"| {r.model} | {r.estimate:.4f} "
                    f"| ({r.ci_low:.4f}, {r.ci_high:.4f}) "
                    f"| {r.aic:.2f} | {'*' if r.best else ''} |"
                )
            out.append("")
    return "\n".join(out).rstrip("\n") + "\n"


def emit_tables(summaries, formats=("csv", "json", "markdown"),
                out_dir: str = ".") -> dict[str, str]:
    """Write results.csv / results.json / tables.md for the given items.

    Accepts experiment summaries and application tables, in any mix.
    Output bytes are a pure function of the input.

    Raises:
        InvalidArgumentError: empty input or unknown format name.
    """
    items = list(summaries)
    if not items:
        raise InvalidArgumentError("nothing to emit: the summary list is empty")
    unknown = set(formats) - {"csv", "json", "markdown"}
    if unknown:
        raise InvalidArgumentError(f"unknown output formats: {sorted(unknown)}")
    metric = [s for s in items if isinstance(s, MetricsSummary)]
    application = [s for s in items if isinstance(s, ApplicationTable)]
    stray = len(items) - len(metric) - len(application)
    if stray:
        raise InvalidArgumentError(
            "emit_tables accepts experiment summaries and application tables only"
        )

    chunks = {"csv": [], "json": [], "markdown": []}
    if metric:
        chunks["csv"].append(render_csv(metric))
        chunks["json"].append(render_json(metric))
        chunks["markdown"].append(render_markdown(metric))
    if application:
        chunks["csv"].append(render_application_csv(application))
        chunks["json"].append(render_application_json(application))
        chunks["markdown"].append(render_application_markdown(application))

    os.makedirs(out_dir, exist_ok=True)
    names = {"csv": "results.csv", "json": "results.json", "markdown": "tables.md"}
    written = {}
    for fmt in formats:
        path = os.path.join(out_dir, names[fmt])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(chunks[fmt]))
        written[fmt] = path
    return written


# ---------------------------------------------------------------------------
# Option resolution


def _coerce(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def load_config(path: str | None, command: str) -> dict:
    """Read the INI config: ``[common]`` keys then ``[command]`` keys."""
    if not path:
        return {}
    if not os.path.exists(path):
        raise InvalidArgumentError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    merged = {}
    for section in ("common", command):
        if parser.has_section(section):
            for key, value in parser.items(section):
                merged[key.replace("-", "_")] = _coerce(value)
    return merged


_DEFAULTS_COMMON = {
    "out_dir": None,  # resolved against SPATIALBIAS_OUT at run time
    "formats": "csv,json,markdown",
}

DEFAULTS = {
    "simulate": {
        "model": "m2", "n": 100, "effect_intercept": 0.0, "effect_treat": 8.0,
        "effect_treat_lag": 2.0, "effect_conf": 0.0, "effect_conf_lag": 0.0,
        "treatment_kind": "binary", "confounder_kind": "normal",
        "treat_range": 1.0, "error_family": "identity", "error_range": 2.0,
        "error_variance": 1.0, "error_nugget": 0.0,
        "scheme": "knn", "k": 4, "threshold": 0.95,
        "pair": "gaussian", "rho": 0.0, "sd_treat": 1.0, "sd_conf": 1.0,
        "latent_range": 1.0, "rate_own": 2.0, "rate_shared": 6.0,
        "out": "dataset.csv",
    },
    "weights": {
        "scheme": "knn", "k": 4, "threshold": 0.95, "standardize": True,
        "geodesic": False, "out": "weights.csv",
        "col_x": "x", "col_y": "y", "col_outcome": "Y",
        "col_treatment": "A", "col_confounder": "",
    },
    "bias": {
        "formula": "interference", "effect_lag": 2.0, "effect_conf": 1.5,
        "effect_conf_lag": 2.0, "rho": 0.5, "sd_treat": 1.0, "sd_conf": 1.0,
        "sd_indep": 1.0, "treat_range": 1.0, "conf_range": 2.0,
        "indep_range": 1.0, "rate_own": 2.0, "rate_shared": 6.0,
        "scheme": "knn", "k": 4, "threshold": 0.95,
        "error_range": 0.0, "error_variance": 1.0, "error_nugget": 0.0,
        "col_x": "x", "col_y": "y", "col_outcome": "Y",
        "col_treatment": "A", "col_confounder": "",
        "out": "",
    },
    "fit": {
        "terms": "intercept,treatment", "estimator": "ols",
        "fix_nugget": False, "level": 0.95,
        "scheme": "knn", "k": 4, "threshold": 0.95,
        "cov_range": 2.0, "cov_variance": 1.0, "cov_nugget": 0.0,
        "col_x": "x", "col_y": "y", "col_outcome": "Y",
        "col_treatment": "A", "col_confounder": "",
        "geodesic": False, "out": "",
    },
    "experiment": {
        "table": "T1", "cell": "", "replicates": 0, "threads": 1,
        **_DEFAULTS_COMMON,
    },
    "tables": {
        "tables": "T1", "replicates": 0, "threads": 1,
        **_DEFAULTS_COMMON,
    },
    "apply": {
        "k": 4, "threshold": 0.50, "fix_nugget": False, "geodesic": False,
        "level": 0.95,
        "col_x": "x", "col_y": "y", "col_outcome": "Y",
        "col_treatment": "A", "col_confounder": "U",
        **_DEFAULTS_COMMON,
    },
}

# Commands that draw random numbers and therefore demand a seed.
_STOCHASTIC = ("simulate", "experiment", "tables")


def resolve_options(command: str, explicit: dict) -> argparse.Namespace:
    """Layer defaults, config file, and explicit flags into one namespace."""
    opts = dict(DEFAULTS[command])
    opts.setdefault("seed", None)
    opts.setdefault("input", None)
    config = load_config(explicit.get("config"), command)
    for key, value in config.items():
        if key == "config":
            continue
        if key not in opts:
            raise InvalidArgumentError(
                f"unknown config key {key!r} for command {command!r}"
            )
        opts[key] = value
    for key, value in explicit.items():
        if key in ("config", "command", "func"):
            continue
        opts[key] = value
    if command in _STOCHASTIC and opts.get("seed") is None:
        raise InvalidArgumentError(f"{command} is stochastic: --seed is required")
    if opts.get("out_dir") is None:
        opts["out_dir"] = os.environ.get(OUT_ENV_VAR, ".")
    return argparse.Namespace(**opts)


def _column_map(opts) -> dict:
    cmap = {"x": opts.col_x, "y": opts.col_y, "outcome": opts.col_outcome,
            "treatment": opts.col_treatment}
    if getattr(opts, "col_confounder", ""):
        cmap["confounder"] = opts.col_confounder
    return cmap


def _formats(opts) -> tuple[str, ...]:
    parts = [p.strip() for p in str(opts.formats).split(",") if p.strip()]
    return tuple(parts)


def _weight_config(opts) -> WeightConfig:
    if opts.scheme == "knn":
        return WeightConfig("knn", k=int(opts.k))
    return WeightConfig("distance", percentile=float(opts.threshold))


# ---------------------------------------------------------------------------
# Command handlers


def cmd_simulate(opts) -> int:
    kwargs = dict(
        effect_intercept=opts.effect_intercept,
        effect_treat=opts.effect_treat,
        effect_treat_lag=opts.effect_treat_lag,
        effect_conf=opts.effect_conf,
        effect_conf_lag=opts.effect_conf_lag,
        treatment_kind=opts.treatment_kind,
        confounder_kind=opts.confounder_kind,
        treatment_cov=CovarianceSpec("exponential", opts.treat_range),
        error=CovarianceSpec(opts.error_family, opts.error_range,
                             variance=opts.error_variance,
                             nugget=opts.error_nugget),
    )
    wcfg = _weight_config(opts)
    terms = MODEL_TERMS.get(str(opts.model).lower())
    if terms is None:
        raise InvalidArgumentError(f"unknown model {opts.model!r}; expected m1..m6")
    if TERM_INTERFERENCE in terms:
        kwargs["weight_treat"] = wcfg
    if TERM_INDIRECT in terms:
        kwargs["weight_conf"] = wcfg
    if TERM_DIRECT in terms or TERM_INDIRECT in terms:
        if opts.pair == "poisson":
            kwargs["pair"] = PoissonPairSpec(opts.rate_own, opts.rate_shared)
            kwargs["treatment_kind"] = "poisson"
            kwargs["confounder_kind"] = "poisson"
        else:
            corr = CovarianceSpec("exponential", opts.latent_range)
            kwargs["pair"] = GaussianPairSpec(
                rho=opts.rho, sd_treat=opts.sd_treat, sd_conf=opts.sd_conf,
                corr_treat=corr, corr_conf=corr,
            )
    spec = model_spec(opts.model, **kwargs)
    # One stream drives locations and fields, so the seed pins everything.
    rng = as_rng(int(opts.seed))
    loc = sample_locations(int(opts.n), seed=rng)
    data = generate(spec, loc, rng)
    write_dataset_csv(data, opts.out)
    print(f"wrote {len(data)} rows to {opts.out}")
    return 0


def _load_for_fit(opts) -> tuple[DataSet, object]:
    if not opts.input:
        raise InvalidArgumentError("--input is required (flag or config key)")
    data = read_spatial_csv(opts.input, _column_map(opts))
    d = (geodesic_distance_matrix(data.loc.points)
         if getattr(opts, "geodesic", False) else distance_matrix(data.loc))
    return data, d


def cmd_weights(opts) -> int:
    data, d = _load_for_fit(opts)
    wcfg = _weight_config(opts)
    w = wcfg.build(d)
    if opts.scheme == "distance" and not opts.standardize:
        from .weights import distance_weights

        w = distance_weights(d, float(opts.threshold))
    write_weight_csv(w, opts.out)
    print(f"wrote {len(data)}x{len(data)} {opts.scheme} weights to {opts.out}")
    return 0


def cmd_fit(opts) -> int:
    data, d = _load_for_fit(opts)
    terms = tuple(t.strip() for t in str(opts.terms).split(",") if t.strip())
    wcfg = _weight_config(opts)
    w = wcfg.build(d)
    data = ensure_lags(data, w, w if data.confounder is not None else None)
    X, names = design_matrix(data, terms)
    if opts.estimator == "ols":
        fit = ols_fit(X, data.outcome, names, level=opts.level)
    elif opts.estimator == "gls-known":
        cov = CovarianceSpec("exponential", opts.cov_range,
                             variance=opts.cov_variance,
                             nugget=opts.cov_nugget).covariance(d.values)
        fit = gls_fit(X, data.outcome, cov, names, level=opts.level)
    elif opts.estimator == "gls-ml":
        fit = ml_fit(X, data.outcome, d, names, level=opts.level,
                     fix_nugget=opts.fix_nugget)
    else:
        raise InvalidArgumentError(f"unknown estimator {opts.estimator!r}")
    text = fit.to_json()
    if opts.out:
        with open(opts.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _bias_error_cov(opts, d) -> np.ndarray | None:
    if not opts.error_range:
        return None
    return CovarianceSpec("exponential", opts.error_range,
                          variance=opts.error_variance,
                          nugget=opts.error_nugget).covariance(d.values)


def cmd_bias(opts) -> int:
    formula = opts.formula
    if formula == "poisson":
        pair = PoissonPairSpec(opts.rate_own, opts.rate_shared)
        value = poisson_confounding_bias(opts.effect_conf, pair)
        record = audit_record("poisson-confounding", value,
                              effect_conf=opts.effect_conf,
                              rate_own=opts.rate_own,
                              rate_shared=opts.rate_shared)
    else:
        if not opts.input:
            raise InvalidArgumentError(
                f"the {formula} formula needs --input point data"
            )
        data, d = _load_for_fit(opts)
        centered = data.treatment - data.treatment.mean()
        cov = _bias_error_cov(opts, d)
        wcfg = _weight_config(opts)
        if formula == "interference":
            w = wcfg.build(d)
            if cov is None:
                value = si_bias_nonspatial(centered, w, opts.effect_lag)
            else:
                value = si_bias_spatial(centered, w, cov, opts.effect_lag)
            record = audit_record("interference", value,
                                  effect_lag=opts.effect_lag,
                                  scheme=wcfg.label, spatial=cov is not None,
                                  n=len(data))
        elif formula == "direct":
            params = DirectSCParams(
                effect_conf=opts.effect_conf, rho=opts.rho,
                sd_treat=opts.sd_treat, sd_conf=opts.sd_conf,
                sd_indep=opts.sd_indep,
                corr_conf_scale=CovarianceSpec(
                    "exponential", opts.conf_range).correlation(d.values),
                corr_indep_scale=CovarianceSpec(
                    "exponential", opts.indep_range).correlation(d.values),
            )
            value = direct_sc_bias(centered, params, cov)
            record = audit_record("direct-confounding", value,
                                  effect_conf=opts.effect_conf, rho=opts.rho,
                                  sd_treat=opts.sd_treat, sd_conf=opts.sd_conf,
                                  sd_indep=opts.sd_indep, n=len(data))
        elif formula == "indirect":
            params = IndirectSCParams(
                effect_conf_lag=opts.effect_conf_lag, rho=opts.rho,
                sd_treat=opts.sd_treat, sd_conf=opts.sd_conf,
                corr_treat=CovarianceSpec(
                    "exponential", opts.treat_range).correlation(d.values),
                corr_conf=CovarianceSpec(
                    "exponential", opts.conf_range).correlation(d.values),
                conf_weights=wcfg.build(d),
            )
            value = indirect_sc_bias(centered, params, cov)
            record = audit_record("indirect-confounding", value,
                                  effect_conf_lag=opts.effect_conf_lag,
                                  rho=opts.rho, scheme=wcfg.label, n=len(data))
        else:
            raise InvalidArgumentError(f"unknown bias formula {formula!r}")
    text = json.dumps(record, indent=2, sort_keys=True)
    if opts.out:
        with open(opts.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _run_cells(cells, threads: int):
    summaries = []
    for cfg in cells:
        summary = run_experiment(cfg, workers=threads)
        summaries.append(summary)
        print(f"{cfg.label}: bias={summary.mean_bias:+.4f} "
              f"rmse={summary.rmse:.4f} coverage={summary.coverage:.3f}",
              flush=True)
    return summaries


def cmd_experiment(opts) -> int:
    replicates = int(opts.replicates) or None
    cells = scenario_grid(opts.table, replicates=replicates,
                          base_seed=int(opts.seed))
    if opts.cell:
        cells = [c for c in cells if opts.cell in c.label]
        if not cells:
            raise InvalidArgumentError(
                f"no cell of {opts.table} matches {opts.cell!r}"
            )
    summaries = _run_cells(cells, int(opts.threads))
    written = emit_tables(summaries, _formats(opts), opts.out_dir)
    for path in written.values():
        print(f"wrote {path}")
    return 0


def cmd_tables(opts) -> int:
    names = [t.strip() for t in str(opts.tables).split(",") if t.strip()]
    unknown = set(names) - set(TABLES)
    if unknown:
        raise InvalidArgumentError(f"unknown tables: {sorted(unknown)}")
    replicates = int(opts.replicates) or None
    summaries = []
    for name in names:
        cells = scenario_grid(name, replicates=replicates,
                              base_seed=int(opts.seed))
        summaries.extend(_run_cells(cells, int(opts.threads)))
    written = emit_tables(summaries, _formats(opts), opts.out_dir)
    for path in written.values():
        print(f"wrote {path}")
    return 0


def cmd_apply(opts) -> int:
    if not opts.input:
        raise InvalidArgumentError("--input is required (flag or config key)")
    data = read_spatial_csv(opts.input, _column_map(opts))
    schemes = default_application_schemes(int(opts.k), float(opts.threshold))
    table = application_pipeline(data, schemes, fix_nugget=opts.fix_nugget,
                                 geodesic=opts.geodesic, level=opts.level)
    print(render_application_markdown([table]), end="")
    written = emit_tables([table], _formats(opts), opts.out_dir)
    for path in written.values():
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_column_flags(p):
    p.add_argument("--col-x", dest="col_x")
    p.add_argument("--col-y", dest="col_y")
    p.add_argument("--col-outcome", dest="col_outcome")
    p.add_argument("--col-treatment", dest="col_treatment")
    p.add_argument("--col-confounder", dest="col_confounder")


def _add_scheme_flags(p):
    p.add_argument("--scheme", choices=("knn", "distance"))
    p.add_argument("--k", type=int)
    p.add_argument("--threshold", type=float)


def _add_output_flags(p):
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--formats")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialbias",
        description=(
            "Quantify, evaluate and correct spatial interference and "
            "confounding bias in treatment-effect estimates."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def new(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="INI config file; flags override it")
        return p

    p = new("simulate", "generate one dataset from a named model")
    p.add_argument("--model")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    for flag in ("--effect-intercept", "--effect-treat", "--effect-treat-lag",
                 "--effect-conf", "--effect-conf-lag", "--treat-range",
                 "--error-range", "--error-variance", "--error-nugget",
                 "--rho", "--sd-treat", "--sd-conf", "--latent-range",
                 "--rate-own", "--rate-shared"):
        p.add_argument(flag, type=float, dest=flag[2:].replace("-", "_"))
    p.add_argument("--error-family", choices=("identity", "exponential", "matern"))
    p.add_argument("--treatment-kind", choices=("normal", "binary", "poisson"))
    p.add_argument("--confounder-kind", choices=("normal", "binary", "poisson"))
    p.add_argument("--pair", choices=("gaussian", "poisson"))
    _add_scheme_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = new("weights", "build a neighborhood weight matrix for point data")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--no-standardize", dest="standardize", action="store_false")
    p.add_argument("--geodesic", action="store_true")
    _add_scheme_flags(p)
    _add_column_flags(p)
    p.set_defaults(func=cmd_weights)

    p = new("bias", "evaluate one closed-form bias formula")
    p.add_argument("--formula",
                   choices=("interference", "poisson", "direct", "indirect"))
    p.add_argument("--input")
    p.add_argument("--out")
    for flag in ("--effect-lag", "--effect-conf", "--effect-conf-lag",
                 "--rho", "--sd-treat", "--sd-conf", "--sd-indep",
                 "--treat-range", "--conf-range", "--indep-range",
                 "--rate-own", "--rate-shared", "--error-range",
                 "--error-variance", "--error-nugget"):
        p.add_argument(flag, type=float, dest=flag[2:].replace("-", "_"))
    p.add_argument("--geodesic", action="store_true")
    _add_scheme_flags(p)
    _add_column_flags(p)
    p.set_defaults(func=cmd_bias)

    p = new("fit", "fit one outcome model to a dataset CSV")
    p.add_argument("--input")
    p.add_argument("--terms")
    p.add_argument("--estimator", choices=("ols", "gls-known", "gls-ml"))
    p.add_argument("--fix-nugget", dest="fix_nugget", action="store_true")
    p.add_argument("--level", type=float)
    p.add_argument("--cov-range", dest="cov_range", type=float)
    p.add_argument("--cov-variance", dest="cov_variance", type=float)
    p.add_argument("--cov-nugget", dest="cov_nugget", type=float)
    p.add_argument("--geodesic", action="store_true")
    p.add_argument("--out")
    _add_scheme_flags(p)
    _add_column_flags(p)
    p.set_defaults(func=cmd_fit)

    p = new("experiment", "run cells of one study grid")
    p.add_argument("--table", choices=TABLES)
    p.add_argument("--cell", help="only cells whose label contains this text")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    _add_output_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = new("tables", "run several study grids back to back")
    p.add_argument("--tables", help="comma-separated table names")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    _add_output_flags(p)
    p.set_defaults(func=cmd_tables)

    p = new("apply", "seven-model comparison on real point data")
    p.add_argument("--input")
    p.add_argument("--k", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--fix-nugget", dest="fix_nugget", action="store_true")
    p.add_argument("--geodesic", action="store_true")
    p.add_argument("--level", type=float)
    _add_column_flags(p)
    _add_output_flags(p)
    p.set_defaults(func=cmd_apply)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    explicit = vars(args)
    command = explicit.pop("command")
    handler = explicit.pop("func")
    try:
        opts = resolve_options(command, explicit)
        return handler(opts)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpatialBiasError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
