"""Exception hierarchy shared across the lab."""


class AblLabError(Exception):
    pass


class ConfigError(AblLabError, ValueError):
    """Bad configuration value, dimension mismatch, or malformed config file."""


class InputError(AblLabError, ValueError):
    """A call received data that violates its precondition."""


class PathError(AblLabError, FileNotFoundError):
    """A configured input file does not exist."""


class FormatError(AblLabError, ValueError):
    """Malformed binary dataset file."""


class TrainingError(AblLabError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class TrainingDiverged(TrainingError):
    """Non-finite loss or gradient during optimisation."""
