"""Exception types shared across the package."""


class GenieError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(GenieError):
    """Invalid generator/job/policy configuration (unknown knob, bad counts, ...)."""


class SchemaError(GenieError):
    """Data does not match the expected schema (missing feature, dim mismatch, ...)."""


class UndefinedMetricError(GenieError):
    """A metric is mathematically undefined for the given data (e.g. zero label sum)."""


class SingularityError(GenieError):
    """A linear system is rank deficient.

    ``columns`` names the collinear feature columns when they could be identified.
    """

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = columns or []


class WeightError(GenieError):
    """An importance weight could not be computed (zero logging density)."""


class InfeasibleError(GenieError):
    """No candidate satisfies the optimization constraints."""
