"""Exception types shared across the package."""


class PerflodError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PerflodError):
    """Invalid or inconsistent configuration (bad parameters, misaligned grids)."""


class GeometryError(ConfigurationError):
    """Geometry violates a structural assumption (e.g. disconnected pore space)."""


class NumericalError(PerflodError):
    """A numerical routine failed to meet its contract."""


class SolverError(NumericalError):
    """Linear solver did not reach the requested residual."""


class DegeneratePatchError(NumericalError):
    """A coarse patch lost too much area to perforation to support its operator."""


class CorrectorError(NumericalError):
    """A corrector problem is unsolvable (empty or singular trial space)."""


class DegenerateBasisError(NumericalError):
    """The reduced multiscale system is not symmetric positive definite."""
