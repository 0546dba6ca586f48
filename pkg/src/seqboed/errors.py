"""Exception hierarchy shared by all modules."""


class SeqboedError(Exception):
    """Base class for errors raised by this package."""


class NumericalDegeneracyError(SeqboedError, ArithmeticError):
    """A covariance or linear system is singular or indefinite.

    ``pivot`` is the smallest pivot of an LDL^T factorization of the
    offending matrix (or the most negative eigenvalue after repair).
    """

    def __init__(self, message, pivot=None):
        if pivot is not None:
            message = f"{message} (smallest pivot {pivot:.3e})"
        super().__init__(message)
        self.pivot = pivot


class ForwardModelError(SeqboedError):
    """Forward model produced non-finite output or failed."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (particle {index})"
        super().__init__(message)
        self.index = index


class DivergedSamplerError(SeqboedError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class LossTransformDomainError(SeqboedError, ValueError):
    """EIG estimate reached the loss shift constant; raise ``c_shift``."""


class IntegratorError(SeqboedError):
    pass


class ConfigError(SeqboedError):
    """Configuration could not be parsed."""


class ValidationError(SeqboedError, ValueError):
    """Configuration parsed but violates a constraint; ``path`` is the field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class StageError(SeqboedError):
    """Failure inside one stage of the sequential loop."""

    def __init__(self, step, stage, cause):
        super().__init__(f"step {step}, stage {stage!r}: {cause}")
        self.step = step
        self.stage = stage
        self.cause = cause
