"""Real-time Bayesian adaptive experimentation engine."""

__version__ = "0.1.0"

from .model import ItemBank, LatentState, PriorSpec, ResponseRecord, irt_success_prob
from .inference import (
    BetaPosterior,
    GroupedTreatmentPosterior,
    MeanFieldPosterior,
    ViConfig,
    beta_predictive,
    beta_update,
    fit_mean_field,
)
from .objectives import DesignScore, PreferencePrior, SampleBudget
from .policies import PolicyDecision, StoppingConfig

__all__ = [
    "__version__",
    "ItemBank",
    "LatentState",
    "PriorSpec",
    "ResponseRecord",
    "irt_success_prob",
    "BetaPosterior",
    "GroupedTreatmentPosterior",
    "MeanFieldPosterior",
    "ViConfig",
    "beta_predictive",
    "beta_update",
    "fit_mean_field",
    "DesignScore",
    "PreferencePrior",
    "SampleBudget",
    "PolicyDecision",
    "StoppingConfig",
]
