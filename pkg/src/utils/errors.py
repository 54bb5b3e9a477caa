# src/utils/errors.py
from typing import Optional


class EquiDiffError(Exception):
    """Base error class for application exceptions."""
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


class DimensionError(EquiDiffError):
    """Operand shapes do not fit the operation."""


class NumericError(EquiDiffError):
    """A computation produced or received non-finite values."""


class InputError(EquiDiffError):
    """Invalid argument values or too little data."""


class ParseError(EquiDiffError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(EquiDiffError):
    """Configuration file missing, malformed or out of range."""


class CheckpointError(EquiDiffError):
    """Checkpoint file unreadable, corrupt or inconsistent with its config."""


class TrainingError(EquiDiffError):
    """Training diverged."""


class PropertyCheckError(EquiDiffError):
    """One or more structural properties failed."""
