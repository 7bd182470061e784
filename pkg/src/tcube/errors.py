"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit code 1); everything
else deriving from ``TcubeError`` is a runtime failure (exit code 2).
"""


class TcubeError(Exception):
    pass


class ValidationError(TcubeError, ValueError):
    pass


class CatalogError(ValidationError):
    pass


class EmptyResultError(CatalogError):
    pass


class SampleError(ValidationError):
    pass


class OutsideExtentError(ValidationError):
    pass


class InsufficientMemoryError(ValidationError):
    pass


class ModelFormatError(ValidationError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class CubeIntegrityError(TcubeError):
    pass


class TrainingError(TcubeError):
    pass


class JobFailedError(TcubeError):
    """A classification job stopped with unfinished chunks; ``resume`` can finish it."""

    def __init__(self, message, job_dir=None):
        super().__init__(message)
        self.job_dir = job_dir
