class TDLabError(Exception):
    """Base class for errors raised by tdlab."""


class ConfigError(TDLabError, ValueError):
    pass


class ValidationError(TDLabError, ValueError):
    pass


class TrainingDiverged(TDLabError, RuntimeError):
    """A loss went non-finite; ``dump`` holds the offending batch."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
