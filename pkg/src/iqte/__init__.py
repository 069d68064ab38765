"""Inference for the difference of conditional quantile functionals between
two high-dimensional groups (individualized quantile treatment effects)."""

from .core import (
    ConfigurationError,
    DataError,
    DegenerateVarianceError,
    DimensionError,
    GroupSample,
    InfeasibleProjectionError,
    IqteError,
    Loading,
    QuantileLevel,
    SolverOptions,
    check_loss,
    quantile_adjusted_covariance,
    sample_covariance,
    score,
)
from .inference import (
    BiasDiagnostics,
    DebiasedFunctional,
    GroupAnalysis,
    IqteEstimate,
    ablated_deb_baseline,
    analyze_group,
    debias_functional,
    estimate_iqte,
    oracle_bias_diagnostics,
    plug_in_lasso_baseline,
)
from .projection import (
    ProjectionProblem,
    ProjectionResult,
    solve_projection,
    solve_projection_with_relaxation,
    tune_projection,
)
from .qr_lasso import PenalizedQrFit, default_lambda, fit_penalized_qr, fit_qr_at_levels
from .sparsity import SparsityEstimates, estimate_sparsity, fit_sparsity

__version__ = "0.1.0"
