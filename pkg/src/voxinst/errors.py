"""Exception types shared across the package."""


class VoxInstError(Exception):
    """Base class for all package-specific errors."""


class EmptyInput(VoxInstError):
    """An operation received an empty point cloud / point list."""


class InvalidGeometry(VoxInstError):
    """Non-finite coordinates, mismatched dimensions, or unknown class ids."""


class IndexOutOfBounds(VoxInstError):
    """A voxel index outside the grid."""


class ShapeError(VoxInstError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(VoxInstError):
    """A configuration that violates its invariants."""


class BadMagic(VoxInstError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(VoxInstError):
    """File format version not supported by this build."""


class CorruptTensorTable(VoxInstError):
    """Checkpoint tensor table truncated or inconsistent."""


class PlacementError(VoxInstError):
    """Scene generation could not place an object within the attempt budget."""


class NumericalDivergence(VoxInstError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class DegenerateBatch(UserWarning):
    """A loss was evaluated on a batch with no usable ground-truth clusters."""
