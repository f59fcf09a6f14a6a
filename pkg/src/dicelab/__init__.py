"""Tabular off-policy evaluation with average stationary-distribution corrections."""
from dicelab.dataset import TrajectoryDataset, generate, generate_by_size, load, save
from dicelab.estimators import (
    average_dice,
    average_reward_baseline,
    batch_linear_dice,
    cop_td,
    estimate_j,
    incremental_linear_dice,
    off_policy_td,
    tabular_average_dice,
)
from dicelab.mdp import Policy, TabularMdp, behaviour_policy, make_env
from dicelab.oracle import OracleReport, assemble_fixed_point, compute_report

__version__ = "0.1.0"

__all__ = [
    "OracleReport", "Policy", "TabularMdp", "TrajectoryDataset", "assemble_fixed_point",
    "average_dice", "average_reward_baseline", "batch_linear_dice", "behaviour_policy",
    "compute_report", "cop_td", "estimate_j", "generate", "generate_by_size",
    "incremental_linear_dice", "load", "make_env", "off_policy_td", "save",
    "tabular_average_dice",
]
