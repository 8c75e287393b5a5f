"""Exception hierarchy shared across the package."""


class EllipctError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(EllipctError, ValueError):
    """Non-finite, out-of-range, or otherwise unusable numeric input."""


class DegenerateProjectionError(EllipctError, ValueError):
    """Silhouette projection is undefined (e.g. ellipsoid encloses the source)."""


class ContractViolationError(EllipctError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(EllipctError, ValueError):
    """Bad configuration file, unknown key, or missing input path."""


class EmptySeedError(EllipctError, RuntimeError):
    """Seed extraction found no voxels above the density threshold."""


class NumericalError(EllipctError, RuntimeError):
    """A solver produced non-finite values and was aborted."""


class TrainingDivergedError(EllipctError, RuntimeError):
    """Training loss exceeded the divergence guard for too many iterations."""
