"""Exception hierarchy shared across the package."""


class RinError(Exception):
    """Base class for all package errors."""


class ShapeError(RinError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(RinError, ValueError):
    """A model or run configuration violates its invariants."""


class ContractError(RinError, ValueError):
    """A caller broke an operation precondition."""


class ScheduleError(RinError, ValueError):
    """A noise schedule produced an unusable value."""


class TrainingError(RinError, RuntimeError):
    """Training diverged (NaN/Inf) or could not continue."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class FormatError(RinError, ValueError):
    """A file on disk does not match its expected binary layout."""
