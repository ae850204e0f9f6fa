"""
pyriskcast

Spatio-temporal relative-risk forecasting for monthly regional case counts:
negative-binomial hierarchical models with distributed-lag covariates, cyclic
monthly effects and CAR-family spatial priors, fitted by Laplace approximation.
"""

__version__ = "0.3.0"

import logging

from .enums import (
    BasisKind,
    ProximityKind,
    SpatialStructure,
    HyperRole,
    FitStatus,
    ScoreSet,
    ScoreFlag,
)
from .models import (
    SplineSpec,
    LagWindow,
    ModelSpec,
    HyperParams,
    InferenceConfig,
    GridConfig,
    DataPaths,
    SimulationConfig,
    RunConfig,
    ComparisonRow,
    ForecastRow,
    ScoreRow,
    BaselineRow,
    FeatureCollection,
    FitManifest,
    SimulationTruth,
)
from .panel import (
    CasePanel,
    ExpectedPanel,
    RiskPanel,
    CovariatePanel,
    PopulationPanel,
    PanelBundle,
    read_cases,
    read_population,
    read_covariate,
    load_and_align,
    load_neighbors,
    load_distances,
    load_bundle,
    compute_expected_counts,
    observed_relative_risk,
)
from .lagbasis import (
    CrossBasis,
    natural_cubic_basis,
    default_lag_spec,
    cross_basis,
    exposure_lag_surface,
    cumulative_exposure_response,
)
from .structures import (
    ProximityMatrix,
    PrecisionStructure,
    ConstrainedGaussian,
    SpatialSpec,
    adjacency_from_neighbor_list,
    distance_threshold_matrix,
    icar_precision,
    proper_car_precision,
    iid_precision,
    bym_structure,
    cyclic_rw1_precision,
    replicate,
    sample_prior,
)
from .model import (
    AssembledModel,
    NegativeBinomialLikelihood,
    GaussianLikelihood,
    nb_log_pmf,
    assemble,
    design_rows,
    joint_log_posterior,
    joint_gradient,
    joint_hessian,
)
from .infer import (
    PosteriorFit,
    FitDiagnostics,
    fit_model,
    fit_at,
    sample_latent,
    dic,
    cv_log_score,
    diagnostics,
    fitted_relative_risk,
    random_effect_summary,
    fixed_effect_intervals,
)
from .forecast import (
    ForecastPanel,
    predict,
    nrmse,
    normalized_interval_score,
    absolute_percentage_error,
    naive_monthly_mean,
    null_model_forecast,
    score_report,
    baseline_report,
)
from .simulate import simulate_dataset, read_truth
from .dataframe import to_dataframe, DataFrameList, ComparisonTable, ScoreReport
from .exceptions import (
    RiskcastError,
    ConfigError,
    DataError,
    SchemaError,
    RegionMismatchError,
    ContiguityError,
    InsufficientHistoryError,
    GeometryMismatchError,
    StructureError,
    NumericalError,
    UndefinedMetricError,
)

# Set up logging to NullHandler by default to avoid "No handler found" warnings.
logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    # Enums
    "BasisKind",
    "ProximityKind",
    "SpatialStructure",
    "HyperRole",
    "FitStatus",
    "ScoreSet",
    "ScoreFlag",
    # Models
    "SplineSpec",
    "LagWindow",
    "ModelSpec",
    "HyperParams",
    "InferenceConfig",
    "GridConfig",
    "DataPaths",
    "SimulationConfig",
    "RunConfig",
    "ComparisonRow",
    "ForecastRow",
    "ScoreRow",
    "BaselineRow",
    "FeatureCollection",
    "FitManifest",
    "SimulationTruth",
    # Panels
    "CasePanel",
    "ExpectedPanel",
    "RiskPanel",
    "CovariatePanel",
    "PopulationPanel",
    "PanelBundle",
    "read_cases",
    "read_population",
    "read_covariate",
    "load_and_align",
    "load_neighbors",
    "load_distances",
    "load_bundle",
    "compute_expected_counts",
    "observed_relative_risk",
    # Lag bases
    "CrossBasis",
    "natural_cubic_basis",
    "default_lag_spec",
    "cross_basis",
    "exposure_lag_surface",
    "cumulative_exposure_response",
    # Spatial and monthly structures
    "ProximityMatrix",
    "PrecisionStructure",
    "ConstrainedGaussian",
    "SpatialSpec",
    "adjacency_from_neighbor_list",
    "distance_threshold_matrix",
    "icar_precision",
    "proper_car_precision",
    "iid_precision",
    "bym_structure",
    "cyclic_rw1_precision",
    "replicate",
    "sample_prior",
    # Model assembly
    "AssembledModel",
    "NegativeBinomialLikelihood",
    "GaussianLikelihood",
    "nb_log_pmf",
    "assemble",
    "design_rows",
    "joint_log_posterior",
    "joint_gradient",
    "joint_hessian",
    # Inference
    "PosteriorFit",
    "FitDiagnostics",
    "fit_model",
    "fit_at",
    "sample_latent",
    "dic",
    "cv_log_score",
    "diagnostics",
    "fitted_relative_risk",
    "random_effect_summary",
    "fixed_effect_intervals",
    # Forecasting
    "ForecastPanel",
    "predict",
    "nrmse",
    "normalized_interval_score",
    "absolute_percentage_error",
    "naive_monthly_mean",
    "null_model_forecast",
    "score_report",
    "baseline_report",
    # Simulation
    "simulate_dataset",
    "read_truth",
    # Utilities
    "to_dataframe",
    "DataFrameList",
    "ComparisonTable",
    "ScoreReport",
    # Exceptions
    "RiskcastError",
    "ConfigError",
    "DataError",
    "SchemaError",
    "RegionMismatchError",
    "ContiguityError",
    "InsufficientHistoryError",
    "GeometryMismatchError",
    "StructureError",
    "NumericalError",
    "UndefinedMetricError",
]
