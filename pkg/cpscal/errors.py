"""Exceptions raised by cpscal."""


class CpsCalError(Exception):
    """Base class for every cpscal failure."""


class ParameterError(CpsCalError, ValueError):
    """An argument lies outside its physical domain."""


class ConfigError(CpsCalError):
    """A scenario or config file could not be parsed or validated."""


class ScopeError(CpsCalError):
    """A scan did not cover enough phase to locate the extrema it needs."""


class UnwrapError(CpsCalError):
    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (sample {index})")
        self.index = index


class FitError(CpsCalError):
    pass


class ConstraintViolationError(CpsCalError):
    """No branch puts the initial phase inside (-pi/2, pi/2)."""


class PassInconsistencyError(CpsCalError):
    pass


class DiscriminationError(CpsCalError):
    """A probe intensity matched none of the expected constants."""


class ThermalSolverError(CpsCalError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual
