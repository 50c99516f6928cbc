"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so raise the most specific one.
"""


class HybridRLError(Exception):
    """Base class for all package errors."""


class InvalidInputError(HybridRLError, ValueError):
    pass


class ModeMismatchError(InvalidInputError):
    """Thinking content supplied for a non-thinking response."""


class ConfigError(HybridRLError, ValueError):
    pass


class LineageError(ConfigError):
    """A checkpoint is not a valid parent for the requested stage."""


class NumericFault(HybridRLError, ArithmeticError):
    pass


class InsufficientDataError(HybridRLError):
    def __init__(self, message: str, *, found: int, wanted: int, attempts: int):
        super().__init__(message)
        self.found = found
        self.wanted = wanted
        self.attempts = attempts


class IngestionError(HybridRLError, ValueError):
    def __init__(self, message: str, offenders: list):
        super().__init__(message)
        self.offenders = offenders


class ScorerError(HybridRLError):
    """Remote scorer failure in strict mode."""
