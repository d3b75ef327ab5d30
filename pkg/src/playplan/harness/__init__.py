"""Configuration, experiment runners, metrics, export and the command line."""

from .config import ConfigError, ExperimentConfig, make_reward
from .experiments import (
    BenchmarkResult,
    ProblemError,
    glide_demo,
    glide_demos,
    monotonicity_eval,
    problem_from_play,
    run_chain_study,
    run_pusht_benchmark,
    run_tracking_study,
    train_pusht_rank_reward,
)
from .export import ExportError, export_plots
from .metrics import ChainMetrics, SuccessCriterion, chain_metrics, success_check

__all__ = [
    "BenchmarkResult",
    "ChainMetrics",
    "ConfigError",
    "ExperimentConfig",
    "ExportError",
    "ProblemError",
    "SuccessCriterion",
    "chain_metrics",
    "export_plots",
    "glide_demo",
    "glide_demos",
    "make_reward",
    "monotonicity_eval",
    "problem_from_play",
    "run_chain_study",
    "run_pusht_benchmark",
    "run_tracking_study",
    "success_check",
    "train_pusht_rank_reward",
]
