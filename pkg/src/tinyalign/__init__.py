"""Tiny numpy models for studying language-model alignment objectives."""
from .errors import BudgetError, ConfigError, DatasetError, InvalidInputError, NumericalError
from .model import PolicyModel, RewardModel, Text, ValueModel
from .data import PreferencePair, SampleGroup, Task

__version__ = "0.1.0"

__all__ = [
    "BudgetError", "ConfigError", "DatasetError", "InvalidInputError", "NumericalError",
    "PolicyModel", "RewardModel", "Text", "ValueModel", "PreferencePair", "SampleGroup", "Task",
]
