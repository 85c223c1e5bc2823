"""Exception types shared across the package."""


class PopdynError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PopdynError, ValueError):
    """Invalid input data or configuration (CLI exit code 2)."""


class InertSeriesError(ValidationError):
    """Series with no interactions at all (maximum like count is zero)."""


class StageFailure(PopdynError, RuntimeError):
    """A pipeline stage failed after validation (CLI exit code 3)."""
