"""Functional residuals and diagnostics for discrete-outcome regression."""

from .core import (
    Dataset,
    Intercept,
    Interaction,
    Linear,
    Power,
    RngStream,
    Spline,
    TermSet,
    design_matrix,
    parse_terms,
    std_normal_cdf,
    std_normal_quantile,
)
from .models import FittedModel, ModelSpec, cumulative_prob, fit, known_model
from .residuals import FunctionalResidual, functional_residual, functional_residuals

__version__ = "0.1.0"
