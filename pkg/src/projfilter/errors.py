"""Exception hierarchy shared by all modules."""


class ProjFilterError(Exception):
    """Base class for every error raised by this package."""


class UnsupportedLevelError(ProjFilterError, ValueError):
    pass


class TransformOverflowError(ProjFilterError):
    """A node sits so close to the boundary of (-1, 1) that erfinv diverges."""


class NonFiniteIntegrandError(ProjFilterError):
    def __init__(self, node_index, value):
        super().__init__(f"integrand is {value!r} at node {node_index}")
        self.node_index = node_index
        self.value = value


class DegenerateDensityError(ProjFilterError):
    """Quadrature sum of an exponential-family integrand is zero, negative or non-finite."""


class MomentDegeneracyError(ProjFilterError):
    """Second moments do not yield a positive definite covariance."""


class MeasurementInconsistencyError(ProjFilterError):
    """The likelihood has (numerically) no mass where the prior does."""


class DivergenceOverflowError(ProjFilterError):
    pass


class InvalidPosteriorError(ProjFilterError):
    pass


class SingularMeasurementError(ProjFilterError):
    pass


class DegenerateParticleError(ProjFilterError):
    pass


class RegionTooSmallError(ProjFilterError):
    pass


class GridMismatchError(ProjFilterError, ValueError):
    pass


class ConfigError(ProjFilterError, ValueError):
    pass


class NumericalFailure(ProjFilterError):
    """An iterative procedure broke down; carries the last good state.

    Attributes
    ----------
    theta, xi : last finite natural parameters and bijection
    trace : partial trace up to the failure (may be None)
    iteration : index of the failing iteration
    """

    def __init__(self, message, theta=None, xi=None, trace=None, iteration=None):
        super().__init__(message)
        self.theta = theta
        self.xi = xi
        self.trace = trace
        self.iteration = iteration
