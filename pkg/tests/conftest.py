"""Shared builders for hand-constructed frames and maps."""

import numpy as np
import pytest

from voxelox.frame_store import FrameBundle, MaskObservation
from voxelox.geometry import CameraIntrinsics, Pose


@pytest.fixture(autouse=True)
def _fixed_numpy_seed():
    # tests draw their own Generators; this guards against accidental
    # reliance on the legacy global RNG
    np.random.seed(0)


def make_intrinsics(width=64, height=48, f=60.0):
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)


def rect_mask_pixels(u0, v0, u1, v1, width):
    """Flat indices of the half-open pixel rectangle [u0,u1) x [v0,v1)."""
    us, vs = np.meshgrid(np.arange(u0, u1), np.arange(v0, v1))
    return (vs.reshape(-1) * width + us.reshape(-1)).astype(np.int64)


def make_frame(frame_id, specs, intr=None, pose=None, dim=8, allow_overlap=False):
    """Build a frame from rectangle specs.

    Each spec is a dict: u0, v0, u1, v1, depth_mm, feature (optional),
    score (optional), caption (optional). The depth raster carries each
    rectangle's depth; elsewhere depth is 0 (invalid).
    """
    intr = intr or make_intrinsics()
    pose = pose or Pose.identity()
    depth = np.zeros((intr.height, intr.width), np.uint16)
    masks = []
    for s in specs:
        px = rect_mask_pixels(s["u0"], s["v0"], s["u1"], s["v1"], intr.width)
        depth.reshape(-1)[px] = s["depth_mm"]
        feature = s.get("feature")
        if feature is None:
            feature = np.ones(dim, np.float32)
        masks.append(MaskObservation(
            pixels=px, feature=np.asarray(feature, np.float32),
            detection_score=s.get("score", 1.0), caption=s.get("caption")))
    return FrameBundle(frame_id=frame_id, depth=depth, pose=pose, intrinsics=intr,
                       masks=masks, allow_overlap=allow_overlap)


def orthogonal_features(n, dim, seed=0, dtype=np.float32):
    """n pairwise-orthonormal feature vectors of the given dimension."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    return q[:n].astype(dtype)
