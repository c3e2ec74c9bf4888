"""Exception hierarchy shared by the library and the command line."""


class EnsboostError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(EnsboostError, ValueError):
    exit_code = 2


class DataError(EnsboostError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class FormatError(DataError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDataError(DataError):
    pass


class EmptyCompositeError(DataError):
    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class DivergenceError(EnsboostError, FloatingPointError):
    """Non-finite loss, gradient or network output during training/inference."""

    exit_code = 4

    def __init__(self, message, parameter=None, epoch=None, batch=None):
        where = []
        if parameter is not None:
            where.append(f"parameter={parameter}")
        if epoch is not None:
            where.append(f"epoch={epoch}")
        if batch is not None:
            where.append(f"batch={batch}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)
        self.parameter = parameter
        self.epoch = epoch
        self.batch = batch


class ConditioningError(DivergenceError):
    """Covariance factorization failed even after jitter escalation."""
