"""Samplers, experiment runner, presets and the command-line interface."""

from .experiment import ExperimentConfig, RunResult, clt_study, run_experiment
from .presets import PRESET_IDS, run_preset
from .samplers import SAMPLER_IDS, corrupt, sample_from

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "run_experiment",
    "clt_study",
    "run_preset",
    "PRESET_IDS",
    "sample_from",
    "corrupt",
    "SAMPLER_IDS",
]
