"""Exception hierarchy shared across the package."""


class Still2VideoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(Still2VideoError, ValueError):
    pass


class ConfigurationError(Still2VideoError):
    """Raised when model/checkpoint/CLI configuration is inconsistent."""


class FlowFormatError(Still2VideoError):
    pass


class IngestionError(Still2VideoError):
    pass


class EstimationError(Still2VideoError):
    pass


class EvaluationError(Still2VideoError):
    pass


class TrainingError(Still2VideoError):
    """Raised when training diverges (non-finite loss)."""
