"""Exception hierarchy shared across the package.

Every error raised by library code derives from VoxrelError so the CLI can
map failures onto stable exit codes (see voxrel.cli).
"""


class VoxrelError(Exception):
    """Base class; `exit_code` drives the CLI process status."""

    exit_code = 6


class ConfigError(VoxrelError):
    """Bad or unknown configuration keys/values."""

    exit_code = 2


class MissingInputError(VoxrelError):
    """A referenced file or directory does not exist."""

    exit_code = 3


class FormatError(VoxrelError):
    """A file exists but cannot be parsed as the expected container."""

    exit_code = 4


class VoxwMagicError(FormatError):
    pass


class VoxwTruncatedError(FormatError):
    pass


class VoxwDimError(FormatError):
    pass


class ManifestSchemaError(FormatError):
    pass


class ModelIntegrityError(FormatError):
    pass


class ValidationError(VoxrelError):
    """Inputs parse but violate a precondition."""

    exit_code = 5


class DimMismatchError(ValidationError):
    pass


class DuplicateSubjectError(ValidationError):
    pass


class RankDeficientError(ValidationError):
    pass


class ZeroVarianceError(ValidationError):
    pass


class EmptyMaskError(ValidationError):
    pass
