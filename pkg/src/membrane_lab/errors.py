"""Exception hierarchy shared by all membrane_lab modules."""


class MembraneLabError(Exception):
    """Base class for all errors raised by this package."""


class CapacityError(MembraneLabError):
    """The requested geometry exceeds the configured site budget."""


class DomainError(MembraneLabError, ValueError):
    """A field or site does not belong to the requested domain."""


class ParameterError(MembraneLabError, ValueError):
    """Invalid model parameter (e.g. a non-positive curvature)."""


class TruncationError(MembraneLabError):
    """A quadrature grid misses more probability mass than allowed."""


class SolverError(MembraneLabError):
    """A linear solve failed or did not reach its residual target.

    Parameters
    ----------
    message : str
        Human readable description.
    residual : float, optional
        Residual norm attained when the solver gave up.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RangeError(MembraneLabError, ValueError):
    """A request lies outside the supported evaluation range."""


class DivergenceError(MembraneLabError):
    """A Markov chain produced a non-finite energy or gradient.

    Parameters
    ----------
    message : str
        Human readable description.
    step : int
        Index of the offending step.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(MembraneLabError):
    """The experiment configuration failed validation."""
