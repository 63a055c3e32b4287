"""voxelox: incremental probabilistic instance-level voxel mapping.

The engine consumes per-frame streams of segmentation masks with caption
embeddings plus depth and camera poses, associates each mask with a
persistent 3D instance, and fuses evidence into a sparse voxel map of
per-instance observation counts and an instance embedding codebook.
"""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose, VoxelKey  # noqa: F401
from .voxel_map import VoxelMap, VoxelState  # noqa: F401
