"""Exception hierarchy shared by all modules."""


class AcsharpError(Exception):
    """Base class for every error raised by the package."""


class EvaluationError(AcsharpError):
    """A user supplied map returned a non-finite value."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ConfigurationError(AcsharpError):
    pass


class PSDViolationError(ConfigurationError):
    """Kernel is not symmetric positive semidefinite."""


class KernelConditioningError(AcsharpError):
    """Cholesky factorisation failed even with the maximal jitter."""


class CapabilityError(AcsharpError):
    """Requested quantity needs a capability the object does not have."""


class ResolutionError(AcsharpError):
    """Grid too coarse for the requested operation."""


class ParameterError(AcsharpError):
    """Exponents or constants violate a hypothesis of the construction."""


class PreconditionError(AcsharpError):
    pass


class DivergenceError(AcsharpError):
    """A scalar flow left the admissible band."""

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class StepSizeError(AcsharpError):
    pass


class BlowUpError(AcsharpError):
    """Field solution became non-finite or left the blow-up guard."""

    def __init__(self, message, t=None, step=None, max_abs=None):
        super().__init__(message)
        self.t = t
        self.step = step
        self.max_abs = max_abs


class InitialConditionError(AcsharpError):
    pass


class HorizonError(AcsharpError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class InterfaceLostError(AcsharpError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class NonConvergenceError(AcsharpError):
    pass


class LogDomainError(AcsharpError):
    pass
