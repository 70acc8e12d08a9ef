"""Teacher-student distillation for click-prediction models on a synthetic stream.

A large teacher emits raw logits into an append-only signal store as it
trains; students with a shared backbone and separate main/aux towers read
those signals through a lag-aware join, correct them for sampling bias, and
distil into the aux tower while the main tower keeps learning from labels.
"""

from .config import load_config, to_text
from .errors import ConfigError, NumericError
from .metrics import MetricsReport, auc, gain_decomposition, transferability
from .pipeline import ArmSpec, ExperimentSpec, ModeFlags, run_experiment
from .presets import PRESET_NAMES, preset

__all__ = [
    "ArmSpec",
    "ConfigError",
    "ExperimentSpec",
    "MetricsReport",
    "ModeFlags",
    "NumericError",
    "PRESET_NAMES",
    "auc",
    "gain_decomposition",
    "load_config",
    "preset",
    "run_experiment",
    "to_text",
    "transferability",
]
