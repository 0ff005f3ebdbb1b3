"""Exception hierarchy shared by every module."""


class MfgError(Exception):
    """Base class for library errors."""


class DimensionError(MfgError, ValueError):
    pass


class UnsupportedCoupling(MfgError, ValueError):
    pass


class UnsupportedDimension(MfgError, ValueError):
    pass


class UnsupportedMeasureDependence(MfgError, ValueError):
    pass


class MissingA4(MfgError, ValueError):
    """Raised when the control enters the diffusion coefficient."""


class ModelEvaluationError(MfgError, ArithmeticError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class SingularHessian(MfgError, ArithmeticError):
    pass


class DivergenceError(MfgError, RuntimeError):
    """Common parent of all iterative-solver failures."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class NewtonDivergence(DivergenceError):
    pass


class PicardDivergence(DivergenceError):
    pass


class FlowDivergence(DivergenceError):
    pass


class BlowUp(DivergenceError):
    pass


class ConfigError(MfgError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
