"""Spatial interference and spatial confounding bias laboratory.

Quantifies, simulates, and corrects the bias that spatial interference,
direct spatial confounding, and indirect spatial confounding induce on
treatment-effect estimates from spatial regressions.  The package pairs
closed-form bias formulas with a seeded Monte Carlo runner over
canonical study grids, plus a command line for ingesting real point
data and running the seven-model comparison.
"""

from .bias import (
    DirectSCParams,
    IndirectSCParams,
    audit_record,
    combined_bias,
    correct_for_interference,
    direct_sc_bias,
    direct_scale_operator,
    indirect_sc_bias,
    m_matrix,
    poisson_confounding_bias,
    si_bias_nonspatial,
    si_bias_spatial,
    write_audit,
)
from .cli import (
    ApplicationRow,
    ApplicationTable,
    application_pipeline,
    emit_tables,
    main,
    read_spatial_csv,
)
from .dgp import (
    MODEL_TERMS,
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
    model_spec,
    read_dataset_csv,
    write_dataset_csv,
)
from .errors import (
    ConvergenceError,
    CsvParseError,
    DegenerateFitError,
    DegenerateGeometryError,
    ExperimentError,
    InvalidArgumentError,
    NumericalError,
    SchemaError,
    SingularDesignError,
    SpatialBiasError,
)
from .estimate import FitResult, gls_fit, ml_fit, ols_fit, wald_ci
from .geocore import (
    PAPER_BOUNDS,
    CovarianceSpec,
    DistanceMatrix,
    GaussianPairSpec,
    LocationSet,
    PoissonPairSpec,
    SpatialFieldSample,
    as_rng,
    correlation_matrix,
    distance_matrix,
    geodesic_distance_matrix,
    gp_draws,
    replicate_rng,
    sample_field,
    sample_gaussian_pair,
    sample_gp,
    sample_locations,
    sample_poisson_pair,
)
from .montecarlo import (
    ESTIMATORS,
    MODEL_MENU,
    TABLES,
    ExperimentConfig,
    MetricsSummary,
    ReplicateRecord,
    cell_seed,
    coverage,
    render_csv,
    render_json,
    render_markdown,
    rmse,
    run_experiment,
    run_replicate,
    scenario_grid,
)
from .weights import (
    WeightMatrix,
    apply_weights,
    distance_weights,
    knn_weights,
    read_weight_csv,
    row_standardize,
    write_weight_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ApplicationRow",
    "ApplicationTable",
    "ConvergenceError",
    "CovarianceSpec",
    "CsvParseError",
    "DataSet",
    "DegenerateFitError",
    "DegenerateGeometryError",
    "DirectSCParams",
    "DistanceMatrix",
    "ESTIMATORS",
    "ExperimentConfig",
    "ExperimentError",
    "FitResult",
    "GaussianPairSpec",
    "IndirectSCParams",
    "InvalidArgumentError",
    "LocationSet",
    "MODEL_MENU",
    "MODEL_TERMS",
    "MetricsSummary",
    "ModelSpec",
    "NumericalError",
    "PAPER_BOUNDS",
    "PoissonPairSpec",
    "ReplicateRecord",
    "SchemaError",
    "SingularDesignError",
    "SpatialBiasError",
    "SpatialFieldSample",
    "TABLES",
    "TERM_DIRECT",
    "TERM_INDIRECT",
    "TERM_INTERCEPT",
    "TERM_INTERFERENCE",
    "TERM_ORDER",
    "TERM_TREATMENT",
    "WeightConfig",
    "WeightMatrix",
    "application_pipeline",
    "apply_weights",
    "as_rng",
    "audit_record",
    "cell_seed",
    "combined_bias",
    "correct_for_interference",
    "correlation_matrix",
    "coverage",
    "design_matrix",
    "direct_sc_bias",
    "direct_scale_operator",
    "distance_matrix",
    "distance_weights",
    "emit_tables",
    "ensure_lags",
    "generate",
    "geodesic_distance_matrix",
    "gls_fit",
    "gp_draws",
    "indirect_sc_bias",
    "knn_weights",
    "m_matrix",
    "main",
    "ml_fit",
    "model_spec",
    "ols_fit",
    "poisson_confounding_bias",
    "read_dataset_csv",
    "read_spatial_csv",
    "read_weight_csv",
    "render_csv",
    "render_json",
    "render_markdown",
    "replicate_rng",
    "rmse",
    "row_standardize",
    "run_experiment",
    "run_replicate",
    "sample_field",
    "sample_gaussian_pair",
    "sample_gp",
    "sample_locations",
    "sample_poisson_pair",
    "scenario_grid",
    "si_bias_nonspatial",
    "si_bias_spatial",
    "wald_ci",
    "write_audit",
    "write_dataset_csv",
    "write_weight_csv",
]
