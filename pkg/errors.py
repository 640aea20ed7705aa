class FunkError(Exception):
    """Base error for everything raised by the library"""


class ValidationError(FunkError):
    """Bad input: wrong shape, inadmissible parameters, invalid config"""


class ShapeError(ValidationError):
    pass


class ConfigValidationError(ValidationError):
    pass


class NumericalError(FunkError):
    """NaN/Inf encountered or an optimization diverged"""


class UnsupportedFormatError(FunkError):
    """Unreadable or unsupported file (bit depth, version, layout)"""


class CheckpointError(FunkError):
    pass
