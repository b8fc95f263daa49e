"""Exception types shared across the package."""


class MialabError(Exception):
    """Base class for all package errors."""


class DimensionError(MialabError):
    """Array shapes disagree with what an operation requires."""


class StaleCacheError(MialabError):
    """A backward pass received a cache that does not match its forward."""


class NumericError(MialabError):
    """A non-finite value appeared where finite math is required."""


class ConfigError(MialabError):
    """A configuration value is missing, malformed, or out of range."""


class ParseError(MialabError):
    """A data file could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MetricUndefinedError(MialabError):
    """A metric has no defined value for the given input (e.g. single-class AUC)."""
