"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, validation
errors exit 2, I/O errors exit 3.
"""


class VoxeloxError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(VoxeloxError):
    """Input data violates a documented invariant."""


class SchemaError(ValidationError):
    """An on-disk file does not match its declared schema.

    The message always names the offending file and field.
    """


class InvalidDepthError(ValidationError):
    """Depth value is non-positive or non-finite."""


class UnobservedVoxelError(VoxeloxError):
    """A per-voxel query was made against a voxel with no counts."""


class UnknownInstanceError(VoxeloxError):
    """An instance ID outside the map's minted range was referenced."""
