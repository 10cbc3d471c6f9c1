"""Shapley-interaction alignment toolkit: exact and sampled interactions, an
uncertainty-gated surrogate, and a synthetic region-phrase alignment game."""

from coalign.errors import (
    ContractViolation,
    DegenerateInputError,
    InvalidArgument,
    NumericFailure,
    ResourceLimitError,
)
from coalign.exact import (
    interaction_exact_expectation_form,
    pairwise_interaction_exact,
    shapley_exact,
    shapley_interaction_exact,
    shapley_vector_exact,
)
from coalign.game import Coalition, GameEvaluator, exclude_then_add, reduce_game
from coalign.sampling import SamplingConfig, instability, sample_interaction, sample_shapley

__version__ = "0.1.0"

__all__ = [
    "Coalition",
    "ContractViolation",
    "DegenerateInputError",
    "GameEvaluator",
    "InvalidArgument",
    "NumericFailure",
    "ResourceLimitError",
    "SamplingConfig",
    "exclude_then_add",
    "instability",
    "interaction_exact_expectation_form",
    "pairwise_interaction_exact",
    "reduce_game",
    "sample_interaction",
    "sample_shapley",
    "shapley_exact",
    "shapley_interaction_exact",
    "shapley_vector_exact",
]
