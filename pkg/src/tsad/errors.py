"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries."""


class ParameterError(ValueError):
    """A model parameter violates its domain (e.g. non-positive scale)."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class CsvError(ValueError):
    """A data file could not be parsed; message carries row/column."""


class InjectionError(ValueError):
    """A synthetic anomaly injection is invalid; message names it."""


class ConfigError(ValueError):
    """A run configuration is missing, unknown, or out of range."""


class DomainError(ValueError):
    """A numeric argument is outside the mathematical domain."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the last stable state."""

    def __init__(self, message, stable_params=None, records=None):
        super().__init__(message)
        self.stable_params = stable_params
        self.records = records if records is not None else []
