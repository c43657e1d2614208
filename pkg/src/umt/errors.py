"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class InvalidRatioError(InvalidInputError):
    """Masking ratio leaves no token per frame."""


class ConfigError(ValueError):
    pass


class ClipFormatError(ValueError):
    """Base class for clip container parse failures."""


class BadMagicError(ClipFormatError):
    pass


class DimOverflowError(ClipFormatError):
    pass


class TruncatedPayloadError(ClipFormatError):
    pass


class ChecksumError(ClipFormatError):
    pass


class CheckpointError(ValueError):
    """Raised for malformed checkpoints or name/shape mismatches on load."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in tensor '{name}'")
        self.name = name
