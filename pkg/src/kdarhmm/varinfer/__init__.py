"""Constrained variational inference for the AR-HMM student."""

from .elbo import (
    ELBO_FIELDS,
    WEIGHT_GRID,
    ElboBreakdown,
    LocalTerms,
    ObjectiveWeights,
    elbo_estimate,
    elbo_single_draw,
    local_terms,
)
from .fit import (
    VARIANTS,
    DistillationConstraint,
    FitResult,
    TrainingConfig,
    fit,
    initial_params,
    posterior_features,
)
from .optim import Adam
from .recognition import RecognitionNet, recognition_potentials, structured_local_posterior
from .variational import GlobalLayout, GlobalVariationalParams, gaussian_entropy, reparam_sample

__all__ = [
    "Adam",
    "DistillationConstraint",
    "ELBO_FIELDS",
    "ElboBreakdown",
    "FitResult",
    "GlobalLayout",
    "GlobalVariationalParams",
    "LocalTerms",
    "ObjectiveWeights",
    "RecognitionNet",
    "TrainingConfig",
    "VARIANTS",
    "WEIGHT_GRID",
    "elbo_estimate",
    "elbo_single_draw",
    "fit",
    "gaussian_entropy",
    "initial_params",
    "local_terms",
    "posterior_features",
    "recognition_potentials",
    "reparam_sample",
    "structured_local_posterior",
]
