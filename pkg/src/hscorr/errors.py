"""Exception types shared across the package."""


class HSCorrError(Exception):
    """Base class for all package errors."""


class CapacityError(HSCorrError, ValueError):
    """A combinatorial or truncation cap was exceeded."""


class DomainError(HSCorrError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(HSCorrError, ValueError):
    """Incompatible or invalid configuration."""


class PathologyError(HSCorrError, ArithmeticError):
    """The flow hit a measure-zero pathological point (simultaneous contacts)."""


class RunawayError(HSCorrError, ArithmeticError):
    """The collision count exceeded its cap during a single flow."""


class ImportanceWeightError(HSCorrError, ArithmeticError):
    """Importance weights degenerated (effective sample size too small)."""


class KernelBoundError(HSCorrError, ArithmeticError):
    """The DSMC majorant underestimated the collision kernel."""


class ResolutionError(HSCorrError, ValueError):
    """Histogram resolution too fine for the ensemble size."""
