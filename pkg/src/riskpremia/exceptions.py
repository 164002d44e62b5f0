"""Exception types raised by the riskpremia package."""


class SupportError(ValueError):
    """An outcome lies outside the support of the chosen utility family."""


class ConvergenceError(RuntimeError):
    """A numerical solver failed to converge or to bracket a root."""


class AmbiguityError(RuntimeError):
    """Multiple sign changes were found where a single crossing was required."""


class OrientationError(RuntimeError):
    """A lottery pair does not have the orientation a model requires."""


class DatasetError(ValueError):
    """A choice file or dataset failed validation."""
