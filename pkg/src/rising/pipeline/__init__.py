"""Experiment orchestration: dataset, targets, training, evaluation."""

from .config import ExperimentConfig
from .stages import (
    PipelineError,
    build_ris,
    build_targets,
    evaluate,
    generate_data,
    profile,
    reconstruct,
    run_all,
    simulate,
    train_network,
)

__all__ = [
    "ExperimentConfig",
    "PipelineError",
    "build_ris",
    "build_targets",
    "evaluate",
    "generate_data",
    "profile",
    "reconstruct",
    "run_all",
    "simulate",
    "train_network",
]
