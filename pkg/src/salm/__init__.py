"""Desk-scale speech-augmented language model with in-context keyword boosting."""

__version__ = "0.1.0"

from .config import (BiasConfig, CorpusConfig, EvalConfig, ICTConfig,
                     NucleusConfig, RunConfig, SALMConfig, TrainConfig,
                     load_run_config)
from .errors import (ConfigError, EmptyInputError, LengthError, SalmError,
                     TrainingAbort, UndefinedMetricError, ValidationError)
from .tokenizer import CharTokenizer

__all__ = [
    "BiasConfig", "CorpusConfig", "EvalConfig", "ICTConfig", "NucleusConfig",
    "RunConfig", "SALMConfig", "TrainConfig", "load_run_config",
    "ConfigError", "EmptyInputError", "LengthError", "SalmError",
    "TrainingAbort", "UndefinedMetricError", "ValidationError",
    "CharTokenizer", "__version__",
]
