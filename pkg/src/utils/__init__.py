from .errors import (
    EquiDiffError,
    DimensionError,
    NumericError,
    InputError,
    ParseError,
    ConfigError,
    CheckpointError,
    TrainingError,
    PropertyCheckError,
)
from .logging import logger

__all__ = [
    'EquiDiffError', 'DimensionError', 'NumericError', 'InputError', 'ParseError',
    'ConfigError', 'CheckpointError', 'TrainingError', 'PropertyCheckError', 'logger',
]
