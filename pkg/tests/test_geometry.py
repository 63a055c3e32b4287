import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelox.errors import InvalidDepthError, ValidationError
from voxelox.geometry import (
    CameraIntrinsics,
    Pose,
    VoxelKey,
    back_project,
    back_project_pixels,
    look_at,
    pack_key,
    pack_keys,
    unpack_key,
    unpack_keys,
    voxelize,
    voxelize_points,
)


def vga_intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0):
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=640, height=480)


def wide_intrinsics():
    # needs enough columns to include pixel u=820
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=1024, height=480)


def rotation_about_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------- back_project


def test_principal_point_lies_on_optical_axis():
    intr = vga_intrinsics()
    p = back_project((320, 240), 1.0, intr, Pose.identity())
    assert np.allclose(p, [0.0, 0.0, 1.0])


def test_pinhole_arithmetic():
    p = back_project((820, 240), 2.0, wide_intrinsics(), Pose.identity())
    assert np.allclose(p, [2.0, 0.0, 2.0])


def test_translation_is_applied_after_rotation():
    pose = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    p = back_project((820, 240), 2.0, wide_intrinsics(), pose)
    assert np.allclose(p, [3.0, 0.0, 2.0])


@pytest.mark.parametrize("depth", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_depth_rejected(depth):
    with pytest.raises(InvalidDepthError):
        back_project((320, 240), depth, vga_intrinsics(), Pose.identity())


def test_pixel_outside_raster_rejected():
    with pytest.raises(ValidationError):
        back_project((640, 0), 1.0, vga_intrinsics(), Pose.identity())


def test_linearity_in_depth():
    intr = vga_intrinsics()
    pose = Pose.identity()
    p1 = back_project((100, 50), 1.0, intr, pose)
    p3 = back_project((100, 50), 3.0, intr, pose)
    assert np.allclose(p3, 3.0 * p1)


def test_pose_composition_matches_manual_transform():
    intr = vga_intrinsics()
    pose = Pose(rotation_about_z(0.7), np.array([0.2, -0.4, 1.1]))
    cam = back_project((411, 99), 1.7, intr, Pose.identity())
    world = back_project((411, 99), 1.7, intr, pose)
    assert np.allclose(world, pose.rotation @ cam + pose.translation)


def test_vectorized_back_projection_matches_scalar():
    intr = vga_intrinsics()
    pose = Pose(rotation_about_z(-0.3), np.array([0.5, 0.1, -0.2]))
    rng = np.random.default_rng(7)
    us = rng.integers(0, 640, 50)
    vs = rng.integers(0, 480, 50)
    ds = rng.uniform(0.2, 4.0, 50)
    pts = back_project_pixels(us, vs, ds, intr, pose)
    for i in range(50):
        expected = back_project((int(us[i]), int(vs[i])), float(ds[i]), intr, pose)
        assert np.allclose(pts[i], expected, atol=1e-12)


# ------------------------------------------------------------------- voxelize


def test_voxelize_origin():
    assert voxelize(np.zeros(3), 0.04) == VoxelKey(0, 0, 0)


def test_voxelize_floor_semantics():
    assert voxelize(np.array([0.05, 0.0, -0.01]), 0.04) == VoxelKey(1, 0, -1)


def test_voxelize_exact_boundary_goes_up():
    assert voxelize(np.array([0.04, 0.04, 0.04]), 0.04) == VoxelKey(1, 1, 1)


@given(
    st.tuples(
        st.integers(min_value=-10000, max_value=10000),
        st.integers(min_value=-10000, max_value=10000),
        st.integers(min_value=-10000, max_value=10000),
    ),
    st.floats(min_value=1e-3, max_value=10.0, allow_nan=False),
)
@settings(max_examples=200, deadline=None)
def test_voxel_center_round_trip(key, resolution):
    center = (np.array(key, dtype=np.float64) + 0.5) * resolution
    assert voxelize(center, resolution) == VoxelKey(*key)


def test_voxelize_points_matches_scalar():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, size=(100, 3))
    keys = voxelize_points(pts, 0.04)
    for i in range(100):
        assert VoxelKey(*keys[i]) == voxelize(pts[i], 0.04)


# ----------------------------------------------------------------- key packing


@given(
    st.integers(min_value=-(2**20), max_value=2**20 - 1),
    st.integers(min_value=-(2**20), max_value=2**20 - 1),
    st.integers(min_value=-(2**20), max_value=2**20 - 1),
)
@settings(max_examples=300, deadline=None)
def test_pack_unpack_round_trip(ix, iy, iz):
    assert unpack_key(pack_key(VoxelKey(ix, iy, iz))) == VoxelKey(ix, iy, iz)


def test_packed_keys_are_unique_across_axes():
    idx = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, 0, -1]], np.int64)
    packed = pack_keys(idx)
    assert len(np.unique(packed)) == 5
    assert np.array_equal(unpack_keys(packed), idx)


def test_pack_rejects_out_of_range():
    with pytest.raises(ValidationError):
        pack_keys(np.array([[2**20, 0, 0]], np.int64))


# ----------------------------------------------------------------- pose checks


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValidationError):
        Pose(np.eye(3) * 1.001, np.zeros(3))


def test_pose_rejects_reflection():
    r = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValidationError):
        Pose(r, np.zeros(3))


def test_pose_matrix_round_trip():
    pose = Pose(rotation_about_z(1.1), np.array([0.3, 0.4, 0.5]))
    again = Pose.from_matrix(pose.matrix())
    assert pose.equals(again)


def test_look_at_faces_target_with_y_down():
    eye = np.array([2.0, 0.0, 0.0])
    pose = look_at(eye, np.zeros(3))
    fwd = pose.rotation[:, 2]
    assert np.allclose(fwd, [-1.0, 0.0, 0.0], atol=1e-12)
    # y axis of the camera points world-down
    assert pose.rotation[2, 1] < -0.99
    assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-12
