"""Pinhole camera model, depth back-projection, and voxel quantization.

Conventions used everywhere in this package:

* Camera frame: x right, y down, z forward (optical axis).
* Poses are world-from-camera: ``p_world = R @ p_cam + t``.
* Voxel indices are ``floor(coordinate / resolution)`` component-wise,
  with the world origin fixed at (0, 0, 0). No recentering, so keys are
  deterministic across runs.

Everything here is a pure function; all of it is safe to call from any
number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidDepthError, ValidationError

DEFAULT_RESOLUTION = 0.04  # meters

# Packed voxel keys use 21 bits per signed axis index.
_KEY_BITS = 21
_KEY_MASK = (1 << _KEY_BITS) - 1
KEY_INDEX_MIN = -(1 << (_KEY_BITS - 1))
KEY_INDEX_MAX = (1 << (_KEY_BITS - 1)) - 1


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside raster {self.width}x{self.height}"
            )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-from-camera rigid transform.

    ``rotation`` must be orthonormal (R^T R = I within 1e-9) with
    det(R) = +1; both are validated on construction because pose files
    are the most common source of silently wrong data.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ValidationError(f"translation must be a 3-vector, got {t.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValidationError("pose contains non-finite values")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-9:
            raise ValidationError(f"rotation not orthonormal: max |R^T R - I| = {err:.3e}")
        det = float(np.linalg.det(r))
        if abs(det - 1.0) > 1e-9:
            raise ValidationError(f"rotation must have det +1, got {det!r}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix, row-major."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"pose matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-12:
            raise ValidationError("pose matrix bottom row must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    def equals(self, other: "Pose", atol: float = 0.0) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= atol
                and np.abs(self.translation - other.translation).max() <= atol)


class VoxelKey(NamedTuple):
    """Signed integer grid indices of one voxel."""

    ix: int
    iy: int
    iz: int


def back_project(pixel: tuple[int, int], depth: float, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Lift one pixel with metric depth to a world-frame 3D point.

    Returns ``R @ (depth*(u-cx)/fx, depth*(v-cy)/fy, depth) + t``.
    Raises :class:`InvalidDepthError` for non-positive or non-finite
    depth so callers can skip the pixel.
    """
    u, v = pixel
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValidationError(f"pixel ({u}, {v}) outside raster {intr.width}x{intr.height}")
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepthError(f"depth must be positive and finite, got {depth!r}")
    cam = np.array([
        depth * (u - intr.cx) / intr.fx,
        depth * (v - intr.cy) / intr.fy,
        depth,
    ])
    return pose.rotation @ cam + pose.translation


def back_project_pixels(us: np.ndarray, vs: np.ndarray, depths: np.ndarray,
                        intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Vectorized :func:`back_project` for N pixels -> (N, 3) world points.

    Depths must already be filtered to positive values; this is the hot
    path and does not re-validate per element.
    """
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    cam = np.empty((us.shape[0], 3))
    cam[:, 0] = depths * (us - intr.cx) / intr.fx
    cam[:, 1] = depths * (vs - intr.cy) / intr.fy
    cam[:, 2] = depths
    return cam @ pose.rotation.T + pose.translation


def voxelize(point: np.ndarray, resolution: float) -> VoxelKey:
    """Quantize a world point to its voxel key: floor(point / resolution)."""
    if resolution <= 0:
        raise ValidationError(f"resolution must be positive, got {resolution!r}")
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValidationError("cannot voxelize non-finite point")
    k = np.floor(p / resolution).astype(np.int64)
    return VoxelKey(int(k[0]), int(k[1]), int(k[2]))


def voxelize_points(points: np.ndarray, resolution: float) -> np.ndarray:
    """Vectorized floor-quantization: (N, 3) world points -> (N, 3) int64 indices."""
    if resolution <= 0:
        raise ValidationError(f"resolution must be positive, got {resolution!r}")
    return np.floor(np.asarray(points, dtype=np.float64) / resolution).astype(np.int64)


def pack_keys(indices: np.ndarray) -> np.ndarray:
    """Pack (N, 3) int64 voxel indices into single int64 keys.

    21 bits per signed axis; raises if any index falls outside
    [-2^20, 2^20), which at 0.04 m resolution is a ±41.9 km world.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx.reshape(1, 3)
    if idx.size and (idx.min() < KEY_INDEX_MIN or idx.max() > KEY_INDEX_MAX):
        raise ValidationError("voxel index outside packable range (21 bits per axis)")
    return ((idx[:, 0] & _KEY_MASK) << (2 * _KEY_BITS)) | ((idx[:, 1] & _KEY_MASK) << _KEY_BITS) | (idx[:, 2] & _KEY_MASK)


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_keys`: int64 keys -> (N, 3) int64 indices."""
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    half = 1 << (_KEY_BITS - 1)
    full = 1 << _KEY_BITS
    for axis, shift in enumerate((2 * _KEY_BITS, _KEY_BITS, 0)):
        v = (keys >> shift) & _KEY_MASK
        out[:, axis] = np.where(v >= half, v - full, v)
    return out


def pack_key(key: VoxelKey) -> int:
    return int(pack_keys(np.array([[key.ix, key.iy, key.iz]], dtype=np.int64))[0])


def unpack_key(packed: int) -> VoxelKey:
    ix, iy, iz = unpack_keys(np.array([packed], dtype=np.int64))[0]
    return VoxelKey(int(ix), int(iy), int(iz))


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None) -> Pose:
    """Build a world-from-camera pose looking from ``eye`` toward ``target``.

    Uses the x-right / y-down / z-forward camera convention, so with the
    default world up (+z) the camera's y axis points world-down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up_w = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    forward = target - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValidationError("look_at target coincides with eye")
    z_cam = forward / n
    x_cam = np.cross(z_cam, up_w)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-9:
        raise ValidationError("look_at direction parallel to up vector")
    x_cam /= nx
    y_cam = np.cross(z_cam, x_cam)
    r = np.column_stack([x_cam, y_cam, z_cam])
    # Re-orthonormalize to keep R^T R = I comfortably below the 1e-9 gate.
    u_svd, _, vt = np.linalg.svd(r)
    return Pose(u_svd @ vt, eye)
