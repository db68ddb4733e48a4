"""Multi-resolution recursive integration for large spatial Gaussian-process models."""

__version__ = "0.1.0"

from .domain import Location, PartitionTree, SpatialDomain, build_partition, grid_domain, multi_roi_grid
from .errors import (
    CapacityError,
    ConditioningError,
    DatasetFormatError,
    DimensionError,
    InfeasiblePartitionError,
    InvalidDomainError,
    MRRIError,
    NonConvergenceError,
    NonPositiveDefiniteError,
    SingularVariabilityError,
    TaskError,
)
from .estimates import MetaEstimate
from .inference import TestResult, calibrated_critical_value, cosine_agreement, wald_interval, z_contrast
from .integration import (
    IntegrationOptions,
    RidgePolicy,
    StackedScores,
    gmm_oracle,
    meta_estimator,
    recursive_integrate,
    sequential_integrate,
    stacked_sensitivity,
    variability,
    weighted_scores,
)
from .likelihood import (
    DataBlock,
    FitOptions,
    ScoreMatrix,
    fit_local_mle,
    log_likelihood,
    per_observation_scores,
    score,
    sensitivity_block,
)
from .model import ModelSpec, ThetaParams, build_cov_matrix, cov_nonstationary, cov_stationary, implied_correlation_summary
from .runtime import Dataset, FileDataset, TaskPlan, execute, plan, read_dataset, write_dataset
from .simulator import MetricsTable, SimConfig, preset, run_study, simulate_dataset
