"""Multivariate space-time Gaussian random fields with non-separable
cross-covariances.

The package builds valid multivariate space-time covariance models from
scale-mixture families (Matern and Cauchy spatial margins under a shared
temporal damping), simulates them exactly, estimates them by windowed
pairwise likelihood, predicts held-out sites by Gaussian conditioning, and
scores the predictions with proper scoring rules. A command line interface
(`mvst`) exposes the same pipeline on CSV and JSON files.
"""

from .kernels import (
    Family,
    MarginalParams,
    ModelSpec,
    TemporalParams,
    ValidityReport,
    bernstein,
    cauchy_corr,
    cov,
    cov_pairs,
    cross_params_cauchy,
    cross_params_matern,
    cross_param_tables,
    matern_corr,
    mixture_density_cauchy,
    mixture_density_matern,
    validate,
)
from .covmodel import (
    DEMO_FIT_SITES,
    DEMO_VALIDATION_SITES,
    CompositeModel,
    PointSet,
    SiteTable,
    Variant,
    assemble_sigma,
    composite_cov,
    demo_composite_model,
    demo_sites,
    distance,
    model_from_dict,
    model_variances,
    pair_cov,
    restrict,
    temporal_cov_x,
)
from .simulate import (
    JitterPolicy,
    NotPositiveDefiniteError,
    SimulationRequest,
    SimulationResult,
    chol_pd,
    simulate,
)
from .estimate import (
    DEFAULT_B_GRID,
    Dataset,
    DegeneratePairError,
    FitReport,
    PairClasses,
    Standardization,
    Window,
    WindowResult,
    WindowSelection,
    build_pair_classes,
    central_difference,
    destandardize,
    empirical_cov,
    empirical_variogram,
    fit,
    full_nll,
    init_params,
    init_params_composite,
    pair_nll,
    param_vector,
    select_window,
    standardize,
    wpl,
)
from .predict import (
    Prediction,
    PredictiveDistribution,
    ScoreTable,
    conditional,
    crps_normal,
    rolling_predict,
    score,
)
from .estimators import SpaceTimeModel

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # kernels
    "Family", "MarginalParams", "ModelSpec", "TemporalParams",
    "ValidityReport", "bernstein", "cauchy_corr", "cov", "cov_pairs",
    "cross_params_cauchy", "cross_params_matern", "cross_param_tables",
    "matern_corr", "mixture_density_cauchy", "mixture_density_matern",
    "validate",
    # covmodel
    "CompositeModel", "PointSet", "SiteTable", "Variant", "assemble_sigma",
    "composite_cov", "demo_composite_model", "demo_sites", "distance",
    "model_from_dict", "model_variances", "pair_cov", "restrict",
    "temporal_cov_x", "DEMO_FIT_SITES", "DEMO_VALIDATION_SITES",
    # simulate
    "JitterPolicy", "NotPositiveDefiniteError", "SimulationRequest",
    "SimulationResult", "chol_pd", "simulate",
    # estimate
    "DEFAULT_B_GRID", "Dataset", "DegeneratePairError", "FitReport",
    "PairClasses", "Standardization", "Window", "WindowResult",
    "WindowSelection", "build_pair_classes", "central_difference",
    "destandardize", "empirical_cov", "empirical_variogram", "fit",
    "full_nll", "init_params", "init_params_composite", "pair_nll",
    "param_vector", "select_window", "standardize", "wpl",
    # predict
    "Prediction", "PredictiveDistribution", "ScoreTable", "conditional", "crps_normal",
    "rolling_predict", "score",
    # estimator facade
    "SpaceTimeModel",
]
