"""Model-based policy optimisation on linear-Gaussian dynamic Bayesian networks."""

from .model import (
    ModelParams,
    PolicyParams,
    RewardSpec,
    Trajectory,
    closed_loop,
    linearize_ode,
    pathway_product,
    policy_value,
    predict_mean_var,
    sample_trajectories,
    sample_trajectory,
    validate_model,
)

__all__ = [
    "ModelParams",
    "PolicyParams",
    "RewardSpec",
    "Trajectory",
    "closed_loop",
    "linearize_ode",
    "pathway_product",
    "policy_value",
    "predict_mean_var",
    "sample_trajectories",
    "sample_trajectory",
    "validate_model",
]
__version__ = "0.1.0"
