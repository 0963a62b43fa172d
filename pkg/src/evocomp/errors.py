"""Exception types shared across the package."""


class ModelFormatError(ValueError):
    """Raised when a model container or manifest fails validation."""


class SchemaError(ValueError):
    """Raised when a genome schema cannot be built or a genome violates it."""


class PlanError(ValueError):
    """Raised when a compression plan violates its invariants."""


class UnrepresentableRankError(PlanError):
    """A rank has no exact code; carries the closest representable code."""

    def __init__(self, message: str, nearest_code: int):
        super().__init__(message)
        self.nearest_code = nearest_code


class DecompositionError(RuntimeError):
    """Raised when a factorization routine fails to converge."""


class EvalError(RuntimeError):
    """Raised when the built-in evaluator cannot produce an accuracy."""


class ProtocolError(RuntimeError):
    """Raised on a violation of the external-evaluator wire protocol."""


class InfeasibleThresholdError(RuntimeError):
    """Raised when no individual satisfying the accuracy floor can be found."""


class ConfigError(ValueError):
    """Raised on invalid engine or run configuration."""
