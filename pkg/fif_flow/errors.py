"""Exception hierarchy shared across the package, each mapped to a CLI exit code."""

from typing import Dict, List, Optional


class FIFError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FIFError):
    """Invalid configuration value, key or section."""

    exit_code = 2


class InvalidArchError(ConfigError):
    """Architecture spec with invalid dimensions or widths."""


class DimensionError(FIFError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class DataError(FIFError):
    """Dataset cannot be built or summarized."""

    exit_code = 2


class CSVParseError(DataError):
    """Malformed CSV cell or row."""

    def __init__(self, message: str, row: int, col: Optional[int] = None):
        location = f"row {row}" if col is None else f"row {row}, col {col}"
        super().__init__(f"{message} ({location})")
        self.row = row
        self.col = col


class NumericalError(FIFError):
    """A numerical routine failed or produced non-finite values."""

    exit_code = 3


class ConvergenceError(NumericalError):
    """Iterative solver did not reach tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class RankCollapseError(NumericalError):
    """Matrix is rank deficient where full rank is required."""


class NotPSDError(NumericalError):
    """Matrix has an eigenvalue below the PSD tolerance."""

    def __init__(self, min_eigenvalue: float):
        super().__init__(f"matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class NonFiniteLossError(NumericalError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite value in loss term '{term}': {value}")
        self.term = term
        self.value = value


class TrainingAborted(NumericalError):
    """Training stopped on a numerical failure; the last checkpoint is kept."""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class StaleTapeError(FIFError):
    """Tape already consumed, or its network changed after recording."""


class CheckpointError(FIFError):
    """Checkpoint file is corrupted or incompatible."""

    exit_code = 2

    def __init__(self, message: str, diff: Optional[List[Dict]] = None):
        if diff:
            lines = [f"  {d['field']}: checkpoint={d['checkpoint']!r} expected={d['expected']!r}" for d in diff]
            message = message + "\n" + "\n".join(lines)
        super().__init__(message)
        self.diff = diff or []
