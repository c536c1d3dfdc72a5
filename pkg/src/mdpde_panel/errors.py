"""Exception and warning types shared across the package."""


class PanelError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(PanelError, ValueError):
    """Inputs with inconsistent shapes or an unusable panel layout."""


class PanelParseError(StructuralError):
    """A panel file could not be read into a balanced dataset."""


class DomainError(PanelError, ValueError):
    """A parameter lies outside its admissible domain."""


class NumericError(PanelError, ArithmeticError):
    """A computation produced a non-finite value."""


class RankDeficiencyError(PanelError, ValueError):
    """The pooled design matrix does not have full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SingularMatrixError(PanelError, ArithmeticError):
    """A matrix that must be inverted is numerically singular."""


class ConfigError(PanelError, ValueError):
    """An experiment configuration file violates its schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VarianceFloorWarning(RuntimeWarning):
    """A variance was raised to the numerical floor."""


class SingularMatrixWarning(RuntimeWarning):
    """A pseudo-inverse was used in place of an ill-conditioned inverse."""
