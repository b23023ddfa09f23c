"""Exception hierarchy shared by the library and the command line."""


class NirError(Exception):
    """Base class for all nirburst errors."""

    exit_code = 1


class DimensionError(NirError, ValueError):
    pass


class DomainError(NirError, ValueError):
    pass


class UsageError(NirError, ValueError):
    exit_code = 2


class NonFiniteError(NirError, FloatingPointError):
    pass


class ConfigError(NirError, ValueError):
    exit_code = 2


class IngestError(NirError, OSError):
    exit_code = 1


class SpecError(NirError, ValueError):
    """Invalid synthetic-burst settings."""

    exit_code = 2


class SingularTransformError(NirError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RenderError(NirError, ArithmeticError):
    pass


class DivergedError(NirError, FloatingPointError):
    """Raised when the training loss becomes non-finite."""

    exit_code = 3

    def __init__(self, step, message=None, checkpoint=None):
        super().__init__(message or f"training diverged at step {step}")
        self.step = step
        self.checkpoint = checkpoint
