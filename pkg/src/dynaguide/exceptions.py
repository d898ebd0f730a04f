class DynaGuideError(Exception):
    """Base class for all package errors."""


class InputError(DynaGuideError, ValueError):
    """Bad user-supplied data: files, label ids, mismatched dimensions."""


class ConfigurationError(DynaGuideError, ValueError):
    """Invalid hyperparameters or tensor shapes."""


class TapeError(DynaGuideError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, reuse after backward)."""


class InvariantError(DynaGuideError, RuntimeError):
    """An internal invariant was violated, e.g. a NaN loss."""


class ImageFormatError(InputError):
    """Malformed image or label file."""


class MalformedHeaderError(ImageFormatError):
    pass


class UnsupportedDepthError(ImageFormatError):
    pass


class TruncatedDataError(ImageFormatError):
    pass
