"""Exception types shared across the package."""


class ReflectaError(Exception):
    """Base class for all domain errors raised by this package."""


class NiftiLoadError(ReflectaError):
    """File is missing, corrupt, or outside the supported NIfTI-1 subset."""


class NiftiWriteError(ReflectaError):
    """File could not be written."""


class StandardizationError(ReflectaError):
    """Standardization region is empty or has zero variance."""


class SingularTransformError(ReflectaError):
    """Affine linear part is not invertible."""


class GridMismatchError(ReflectaError):
    """Volumes or fields that must share a grid do not."""


class RegistrationError(ReflectaError):
    """Registration produced a non-finite metric or otherwise failed."""


class SamplingError(ReflectaError):
    """A requested sample class is empty."""


class ConfigError(ReflectaError):
    """Invalid configuration file or parameter set."""
