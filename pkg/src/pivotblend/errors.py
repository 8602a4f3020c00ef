"""Exception hierarchy shared by all modules."""


class PivotBlendError(Exception):
    """Base class for library errors."""


class DomainError(PivotBlendError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(PivotBlendError, ValueError):
    """Invalid configuration or loss parameters."""


class DegeneratePivotError(PivotBlendError, ValueError):
    """The pivot has zero base density, so the blend weight is undefined."""


class QuadratureError(PivotBlendError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OptimizationError(PivotBlendError, RuntimeError):
    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces or []


class PartitionError(PivotBlendError, ValueError):
    """The response cannot be split into zero and positive parts."""


class StratificationError(PivotBlendError, ValueError):
    """A cross-validation fold lacks zeros or positives."""


class NotConvergedError(PivotBlendError, RuntimeError):
    """An operation that requires a converged fit received one that is not."""


class InternalError(PivotBlendError, RuntimeError):
    """An internal invariant (such as MM descent) was violated."""
