"""Weighted cumulative index of exposure (WCIE) for longitudinal outcomes.

Two-stage estimation: a spline mixed model reconstructs each subject's
exposure history, and a linear mixed model for the outcome estimates the
time-varying weights of that history on the outcome level and slope.
"""

__version__ = "0.1.0"

from .data import DataError, LongitudinalDataset
from .exposure import ExposureHistory, ExposureStage, MissingExposureError, compute_history_covariates, make_grid
from .inference import BootstrapError, BootstrapResult, parametric_bootstrap, pointwise_ci, total_variance
from .mixed import (
    CollinearityError,
    ConvergenceError,
    Design,
    MixedModelFit,
    MixedModelSpec,
    fit_lmm,
    log_likelihood,
    predict_blup,
)
from .pipeline import PipelineSettings, TwoStageResult, run_two_stage
from .simulator import SimulationConfig, generate_cohort, generate_visit_times, run_replication_study, scenario
from .splines import (
    KnotError,
    SplineBasis,
    build_natural_cubic_basis,
    build_piecewise_constant_basis,
    eval_basis,
    weight_basis,
)
from .trajectory import (
    AssociationTrajectory,
    MissingHistoryError,
    OutcomeModelSpec,
    fit_outcome_model,
    reconstruct_trajectory,
    select_knots_by_aic,
)
