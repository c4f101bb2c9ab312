"""Exception hierarchy shared by every module of the package."""


class EnsemblePrivacyError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EnsemblePrivacyError, ValueError):
    """Invalid configuration or hyper-parameter."""


class UsageError(EnsemblePrivacyError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ShapeError(UsageError):
    """Array dimensions do not match what the model expects."""


class NumericError(EnsemblePrivacyError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class TrainingError(EnsemblePrivacyError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ParseError(EnsemblePrivacyError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnavailableAttackError(EnsemblePrivacyError, RuntimeError):
    """The attack cannot be mounted with the data available to the attacker."""


class UndefinedMetricError(EnsemblePrivacyError, ValueError):
    """A metric is undefined for the given input (e.g. a single class)."""


class SchemaError(EnsemblePrivacyError, ValueError):
    """A CSV file lacks a required column."""
