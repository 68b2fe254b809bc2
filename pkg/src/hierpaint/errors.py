"""Exception types shared across the package."""


class HierpaintError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HierpaintError, ValueError):
    """Invalid parameter, shape or configuration."""


class DataError(HierpaintError):
    """Malformed or inconsistent input data (files, masks, manifests)."""


class VolumeIOError(DataError, OSError):
    """NIfTI read/write failure."""


class NumericalError(HierpaintError, FloatingPointError):
    """Non-finite values during training or sampling.

    ``stage`` and ``step`` identify where the failure happened.
    """

    def __init__(self, message, stage=None, step=None):
        self.stage = stage
        self.step = step
        where = []
        if stage is not None:
            where.append(f"stage={stage}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
