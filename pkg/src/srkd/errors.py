"""Exception taxonomy shared by all srkd modules.

The CLI maps ConfigurationError to exit code 2 and every other SrkdError
(structural, numeric, integrity) to exit code 3.
"""


class SrkdError(Exception):
    """Base class for all srkd errors."""


class ConfigurationError(SrkdError):
    """Invalid configuration value, key, or argument combination."""


class StructuralError(SrkdError):
    """Inputs are structurally inconsistent (shapes, indices, ids)."""


class ShapeError(StructuralError):
    """Tensor/array shape mismatch."""


class SliceIndexError(StructuralError, IndexError):
    """Slice depth outside the extent of the requested axis."""


class NumericError(SrkdError):
    """Non-finite values or numerically impossible operation."""


class TrainingDivergence(NumericError):
    """Training loss exceeded the divergence threshold for too long."""


class IntegrityError(SrkdError):
    """Persisted artifact is corrupt or fails its hash check."""
