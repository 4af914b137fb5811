"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation problems exit 1, missing
artifacts exit 2, numeric failures exit 3.
"""


class SoundingLocError(Exception):
    """Base class for all package errors."""


class DomainError(SoundingLocError, ValueError):
    """An argument is outside the domain an operation accepts."""


class ShapeError(DomainError):
    """Array shapes or channel dimensions are incompatible."""


class ValidationError(DomainError):
    """A dataset, manifest or config failed validation."""


class ConfigError(ValidationError):
    """A run configuration is inconsistent or incomplete."""


class StateError(SoundingLocError, RuntimeError):
    """A required artifact or trained state is missing."""


class NumericError(SoundingLocError, ArithmeticError):
    """Non-finite values or a collapsed optimisation."""


class EmptyMask(SoundingLocError):
    """A binarized localization map selected no cells."""


class LocalizationCollapsed(NumericError):
    """Too many samples produced empty masks during extraction."""
