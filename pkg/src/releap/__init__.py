"""Reinforcement-learned blending of active-learning strategies for correcting
noisy proxy phenotype labels, with baselines and a replicated experiment harness."""

from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .harness import run_experiment, summarize
from .loop import LoopConfig, run_episode
from .synthcohort import CohortConfig, generate_cohort, split_cohort

__version__ = "0.1.0"

__all__ = ["CohortConfig", "ExperimentConfig", "LoopConfig", "generate_cohort", "load_config",
           "parse_config", "run_episode", "run_experiment", "serialize_config", "split_cohort",
           "summarize"]
