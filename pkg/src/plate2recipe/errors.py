"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ServiceError -> 4.
"""


class Plate2RecipeError(Exception):
    """Base class for all package errors."""


class ConfigError(Plate2RecipeError):
    """Invalid configuration or arguments."""


class DataError(Plate2RecipeError):
    """Corpus metadata or image files could not be read."""


class CheckpointError(Plate2RecipeError):
    """Checkpoint missing, malformed, or incompatible."""


class NumericalError(Plate2RecipeError):
    """Non-finite values encountered during a forward pass or training."""


class CodeParseError(Plate2RecipeError):
    """Generated recipe code could not be parsed."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ServiceError(Plate2RecipeError):
    """External completion service failed after retries."""
