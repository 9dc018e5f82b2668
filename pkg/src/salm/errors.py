"""Exception taxonomy shared across the package.

ValidationError (and subclasses) map to CLI exit code 2, everything else
raised out of a command maps to exit code 1.
"""


class SalmError(Exception):
    """Base class for all package errors."""


class ValidationError(SalmError):
    """Input or configuration violates a documented invariant."""


class ConfigError(ValidationError):
    """Bad key or value in a config file / override."""


class EmptyInputError(ValidationError):
    """An operation received an empty sequence it cannot process."""


class LengthError(SalmError):
    """A sequence exceeds the model's maximum length."""


class UndefinedMetricError(SalmError):
    """A metric has no defined value on the given corpus (e.g. empty refs)."""


class TrainingAbort(SalmError):
    """Training stopped on a non-recoverable state (e.g. NaN loss)."""
