"""Error hierarchy shared by every lab module.

Each error carries the ``exit_code`` that the CLI returns for it.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all lab failures."""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InputError(LabError, ValueError):
    """Caller supplied an argument outside an operation's domain."""

    exit_code = 2


class ConfigError(LabError):
    """Configuration is invalid or inconsistent."""

    exit_code = 3


class ParseError(LabError):
    """A file could not be parsed."""

    exit_code = 4

    def __init__(self, detail: str, line: Optional[int] = None):
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)
        self.line = line


class GenerationError(LabError):
    """Task generation could not produce a valid sample."""

    exit_code = 5


class NumericalError(LabError):
    """A computation produced non-finite values."""

    exit_code = 6
