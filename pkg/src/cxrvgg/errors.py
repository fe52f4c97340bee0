"""Exception types shared across the package."""


class CxrError(Exception):
    """Base class for all package errors."""


class DimensionError(CxrError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CxrError, ValueError):
    """An argument lies outside the domain of the operation."""


class StateError(CxrError, RuntimeError):
    """A stateful object was used out of order (e.g. backward before forward)."""


class SpecError(CxrError, ValueError):
    """An architecture spec is malformed or does not chain."""


class DatasetError(CxrError):
    """The dataset layout or contents are unusable."""


class InputError(CxrError, OSError):
    """A file could not be read or decoded."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class DegenerateInputError(DomainError):
    """Statistics cannot be formed (e.g. a zero-variance channel)."""


class ConfigError(CxrError, ValueError):
    """A run configuration is invalid."""


class NumericError(CxrError, ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message, fold=None, epoch=None):
        self.fold = fold
        self.epoch = epoch
        where = []
        if fold is not None:
            where.append(f"fold {fold}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
