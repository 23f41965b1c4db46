"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor arguments disagree in shape or channel count."""


class SizingError(ValueError):
    """An extent is outside the supported FFT sizes."""


class ParameterError(ValueError):
    """An argument value is out of its valid range."""


class FormatError(Exception):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""
