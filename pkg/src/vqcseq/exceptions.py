"""Exception hierarchy.

Format errors are split by cause so callers (and the CLI exit codes) can
tell a corrupted file from a version skew or a config mismatch.
"""


class VQCError(Exception):
    """Base class for all package errors."""


class ShapeError(VQCError, ValueError):
    """Array shapes or dimensions do not satisfy an operation's contract."""


class FormatError(VQCError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class ConfigMismatchError(VQCError):
    """A checkpoint was written for a different model configuration."""


class IntegrityError(VQCError):
    """Dataset on disk is inconsistent with its manifest."""


class NumericError(VQCError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})


class ConfigError(VQCError, ValueError):
    """A configuration file or override names an unknown key or bad value."""
