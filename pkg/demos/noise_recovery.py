"""Watch the map heal after a corrupted frame.

Two boxes are observed cleanly, then a single frame arrives in which the
detector merged them into one mask. Each voxel keeps an integer count
per instance, so one bad observation is outvoted as soon as clean
evidence returns -- no rollback or reprocessing involved.

    python3 demos/noise_recovery.py
"""

import numpy as np

from voxelox.association import project_mask
from voxelox.evolution import Codebook, integrate_frame
from voxelox.frame_store import FrameBundle, MaskObservation
from voxelox.geometry import CameraIntrinsics, Pose
from voxelox.voxel_map import VoxelMap

INTR = CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)


def rect(u0, v0, u1, v1):
    us, vs = np.meshgrid(np.arange(u0, u1), np.arange(v0, v1))
    return (vs * INTR.width + us).ravel().astype(np.int64)


def frame(frame_id, merged):
    feat_a = np.eye(8, dtype=np.float32)[0]
    feat_b = np.eye(8, dtype=np.float32)[1]
    px_a, px_b = rect(6, 14, 22, 34), rect(40, 14, 56, 34)
    depth = np.zeros((INTR.height, INTR.width), np.uint16)
    depth.reshape(-1)[px_a] = 1200
    depth.reshape(-1)[px_b] = 1200
    if merged:
        masks = [MaskObservation(pixels=np.union1d(px_a, px_b),
                                 feature=feat_a, detection_score=0.9)]
    else:
        masks = [MaskObservation(pixels=px_a, feature=feat_a, detection_score=0.9),
                 MaskObservation(pixels=px_b, feature=feat_b, detection_score=0.8)]
    return FrameBundle(frame_id=frame_id, depth=depth, pose=Pose.identity(),
                       intrinsics=INTR, masks=masks)


def main():
    vmap, book = VoxelMap(0.04), Codebook()
    schedule = [False, True, False, False, False]

    clean = frame(0, merged=False)
    region_b = project_mask(clean.masks[1], clean, vmap.resolution)

    for i, merged in enumerate(schedule):
        integrate_frame(vmap, book, frame(i, merged))
        labels, _ = vmap.argmax_for_keys(region_b)
        fraction = float(np.mean(labels == 1))
        tag = "<- corrupted frame (masks merged)" if merged else ""
        print(f"frame {i}: box B voxels labeled correctly: {fraction:6.1%} {tag}")

    print("\nthe bad observation stays in the counts; clean evidence outweighs it")


if __name__ == "__main__":
    main()
