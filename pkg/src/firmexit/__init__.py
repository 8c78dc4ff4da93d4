"""Optimal market exit of a firm with quadratic profit under GBM demand."""

from .core_model import (
    Admissibility,
    ModelParams,
    ReducedParams,
    check_admissibility,
    optimal_quantity,
    perpetual_value,
    profit,
    reduce_sunk_cost,
)
from .analytic import (
    closed_form,
    compute_roots,
    full_value,
    hjb_residual,
    threshold_policy_value,
    value,
    value_derivatives,
)

__version__ = "0.1.0"

REFERENCE_PARAMS = ModelParams(alpha=0.02, sigma=0.2, r=0.1, gamma=1.0, K=1.0)
