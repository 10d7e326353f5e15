"""Exception hierarchy shared across the package."""


class CargocastError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CargocastError):
    """Invalid configuration value or combination."""


class IngestError(CargocastError):
    """Malformed input data; carries the offending row number when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class UnknownODError(CargocastError):
    """Requested O&D pair does not exist in the dataset."""


class ModelUnavailableError(CargocastError):
    """A model cannot produce a forecast for this series.

    The expert-selection layer treats this as "model unavailable" and
    excludes the model from consideration for that O&D.
    """


class InsufficientHistoryError(ModelUnavailableError):
    """Training slice is shorter than the model's minimum history."""


class ShapeError(CargocastError):
    """Tensor operands have incompatible shapes; names the op involved."""


class NonFiniteError(CargocastError):
    """A NaN or Inf appeared where only finite values are valid."""
