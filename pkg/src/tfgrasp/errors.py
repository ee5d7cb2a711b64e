"""Exception types shared across the package."""


class TfGraspError(Exception):
    """Base class for all package errors."""


class ShapeError(TfGraspError):
    """Operand shapes are inconsistent with the operation."""


class ParameterError(TfGraspError):
    """A hyperparameter or parameter array is invalid."""


class ConfigurationError(TfGraspError):
    """Model/CLI configuration is internally inconsistent."""


class NumericError(TfGraspError):
    """Non-finite values where finite ones are required."""


class ContractError(TfGraspError):
    """An API precondition was violated by the caller."""


class FormatError(TfGraspError):
    """A file does not match its expected format."""


class DataError(TfGraspError):
    """Dataset content is unusable (e.g. all-invalid depth)."""


class SplitError(TfGraspError):
    """A cross-validation split cannot be constructed."""


class DegenerateAngleError(TfGraspError):
    """Angle decode called on the (0, 0) vector."""


class DegenerateRectangleError(TfGraspError):
    """Rectangle with non-positive width or height."""
