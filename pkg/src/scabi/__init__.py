"""Amortized Bayesian inference with normalizing flows and a self-consistency penalty."""

from .densities import DistributionSpec, keyed_rng, log_prob, sample, spawn_rngs
from .errors import CheckpointError, ContractError, SimulationError, TrainingError
from .flows import ConditionalFlow, FlowConfig
from .objectives import ScheduleSpec, SelfConsistencyConfig, combined_loss, schedule_weight
from .simulators import JointTask, SimulationSet, load_simulations, make_task, save_simulations
from .summaries import DeepSet, SummaryConfig
from .training import ModelBundle, ModelConfig, TrainingConfig, generate_training_set, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConditionalFlow",
    "ContractError",
    "DeepSet",
    "DistributionSpec",
    "FlowConfig",
    "JointTask",
    "ModelBundle",
    "ModelConfig",
    "ScheduleSpec",
    "SelfConsistencyConfig",
    "SimulationError",
    "SimulationSet",
    "SummaryConfig",
    "TrainingConfig",
    "TrainingError",
    "combined_loss",
    "generate_training_set",
    "keyed_rng",
    "load_simulations",
    "log_prob",
    "make_task",
    "sample",
    "save_simulations",
    "schedule_weight",
    "spawn_rngs",
    "train",
]
