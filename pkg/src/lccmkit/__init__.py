"""Latent class choice modelling with posterior inference."""

from ._backend import BACKEND
from .comparison import Comparison, compare_membership_models
from .dataset import (
    ChoiceDataset,
    ChoiceSchema,
    DataError,
    IndicatorMatrix,
    IndicatorSchema,
    join,
    load_choice_data,
    load_indicators,
)
from .efa import EfaError, EfaResult, apply_retention, factor_scores, fit_efa
from .fmnl import FmnlError, FmnlResult, estimate_fmnl, fmnl_quasi_loglik, predict_shares
from .kernels import Constraint, NestStructure, UtilitySpec, mnl_log_probs, nl_log_probs
from .lccm import (
    EstimateOptions,
    EstimationError,
    EstimationResult,
    ModelSpec,
    Params,
    compensating_differential,
    compensating_differentials,
    estimate,
    estimate_sequential_membership,
    marginal_loglik,
    marginal_loglik_and_gradient,
    standard_errors,
)
from .posterior import (
    PosteriorMatrix,
    class_profile,
    pairwise_t,
    posterior_membership,
    profile_report,
    weighted_anova,
)

__version__ = "0.1.0"
