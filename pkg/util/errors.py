# util/errors.py

class ToolkitError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = 2

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class ValidationError(ToolkitError):
    """Input is wrong: bad config, bad paths, incompatible shapes."""
    exit_code = 1


class ShapeError(ValidationError):
    pass


class EmptySupervisionError(ValidationError):
    """Every pixel of a mask carries the ignore label."""


class EmptyMatrixError(ValidationError):
    """A confusion matrix or histogram has no counted pixels."""


class NumericalError(ToolkitError):
    exit_code = 2


class NonFiniteError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, checkpoint: str | None = None, **details):
        super().__init__(message, checkpoint=checkpoint, **details)
        self.checkpoint = checkpoint


class FatalIOError(ToolkitError):
    exit_code = 2


class VerificationFailure(ToolkitError):
    """A check ran to completion and its result is a failure."""
    exit_code = 3
