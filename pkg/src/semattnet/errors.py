"""Exception hierarchy.  Each class maps to one CLI exit-code category."""


class SemAttNetError(Exception):
    exit_code = 1
    category = "error"


class ValidationError(SemAttNetError, ValueError):
    """Non-finite values, negative losses, out-of-range arguments."""

    exit_code = 2
    category = "validation"


class DimensionError(SemAttNetError, ValueError):
    """Tensors whose shapes do not line up with each other."""

    exit_code = 2
    category = "dimension"


class ShapeError(DimensionError):
    """A single tensor with an unusable spatial size."""

    category = "shape"


class EmptyMaskError(ValidationError):
    """No valid ground-truth pixel to average over."""


class FormatError(SemAttNetError):
    exit_code = 3
    category = "format"


class DataError(SemAttNetError):
    exit_code = 3
    category = "data"


class ConfigError(SemAttNetError):
    exit_code = 4
    category = "config"


class VersionError(SemAttNetError):
    """Checkpoint incompatible with the requested configuration."""

    exit_code = 5
    category = "version"


class NonFiniteLossError(SemAttNetError):
    exit_code = 6
    category = "non-finite-loss"
