"""Exception hierarchy shared by every fovx module."""


class FovxError(Exception):
    """Base class for all errors raised by fovx."""


class FormatError(FovxError, ValueError):
    """A file does not follow the expected layout."""


class UnsupportedError(FovxError, ValueError):
    """Input is well formed but outside what fovx handles."""


class UnsupportedShellError(UnsupportedError):
    """A b-value falls outside both supported shells."""


class ValidationError(FovxError, ValueError):
    """A value violates a documented invariant."""


class GeometryError(FovxError, ValueError):
    """Grids disagree or an affine is not invertible."""


class DegenerateInputError(FovxError, ValueError):
    """Data carries no usable signal (e.g. nothing positive to normalize)."""


class CompletenessError(FovxError, ValueError):
    """A per-slice collection is missing entries."""


class CorruptionError(FovxError, ValueError):
    """A saved model bundle is inconsistent with its manifest."""


class ConfigError(FovxError, ValueError):
    """Run configuration or dataset does not satisfy a command's needs."""


class TruncatedFileError(FovxError, OSError):
    """A file ended before its declared payload."""


class ManifestError(FovxError, ValueError):
    """A dataset manifest is malformed or points at missing files."""
