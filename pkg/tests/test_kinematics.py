"""Kinematics oracle tests: rotation codec, FK, canonical frame, velocities."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelflow import kinematics as kin


def random_rotations(n, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4))
    return kin.quat_to_mat(q)


def chain_skeleton(offsets):
    offsets = np.asarray(offsets, dtype=np.float64)
    J = offsets.shape[0]
    topo = kin.Topology(names=[f"j{i}" for i in range(J)], parents=np.arange(J) - 1)
    return kin.Skeleton(topo, offsets)


def make_clip(skel, local_rot, root_pos=None, fps=30.0):
    T, J = local_rot.shape[:2]
    if root_pos is None:
        root_pos = np.zeros((T, 3))
    return kin.MotionClip(fps=fps, root_pos=root_pos, root_rot=local_rot[:, 0], local_rot=local_rot)


# -- 6D codec -----------------------------------------------------------------

def test_rot6d_identity():
    np.testing.assert_array_equal(kin.rot6d_encode(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_rot6d_z90():
    sixd = kin.rot6d_encode(kin.rot_z(np.pi / 2))
    np.testing.assert_allclose(sixd, [0, 1, 0, -1, 0, 0], atol=1e-15)


def test_rot6d_round_trip_random():
    R = random_rotations(100, seed=1)
    back = kin.rot6d_decode(kin.rot6d_encode(R))
    assert np.abs(back - R).max() < 1e-9


def test_rot6d_decode_scale_invariant():
    R = random_rotations(10, seed=2)
    sixd = kin.rot6d_encode(R)
    np.testing.assert_allclose(kin.rot6d_decode(2.0 * sixd), kin.rot6d_decode(sixd), atol=1e-12)


def test_rot6d_decode_always_orthonormal():
    rng = np.random.default_rng(3)
    sixd = rng.standard_normal((200, 6))
    sixd[0] = 0.0                      # fully degenerate
    sixd[1, 3:] = sixd[1, :3]          # parallel columns
    R = kin.rot6d_decode(sixd)
    eye = np.broadcast_to(np.eye(3), R.shape)
    np.testing.assert_allclose(np.swapaxes(R, -1, -2) @ R, eye, atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_rot6d_noise_perturbation_sweep():
    # uniform noise in [-0.1, 0.1] per element; bound frozen from the sweep
    rng = np.random.default_rng(4)
    R = random_rotations(500, seed=5)
    noisy = kin.rot6d_encode(R) + rng.uniform(-0.1, 0.1, size=(500, 6))
    ang = kin.geodesic_angle(R, kin.rot6d_decode(noisy))
    assert np.mean(ang) < 0.12
    assert np.max(ang) < 0.45


# -- quaternions / yaw -----------------------------------------------------------

def test_quat_mat_round_trip():
    R = random_rotations(200, seed=6)
    back = kin.quat_to_mat(kin.mat_to_quat(R))
    assert np.abs(back - R).max() < 1e-9


def test_geodesic_angle_simple():
    np.testing.assert_allclose(kin.geodesic_angle(np.eye(3), kin.rot_x(0.3)), 0.3, atol=1e-12)


def test_yaw_twist_pure_yaw():
    thetas = np.linspace(-3.0, 3.0, 13)
    np.testing.assert_allclose(kin.yaw_twist(kin.rot_y(thetas)), thetas, atol=1e-12)


def test_yaw_twist_left_composition():
    # yaw composed on the left of a pure swing (rotation about a horizontal
    # axis) is recovered exactly
    rng = np.random.default_rng(7)
    for _ in range(20):
        yaw = rng.uniform(-np.pi, np.pi)
        ang = rng.uniform(-1.5, 1.5)
        ax = rng.uniform(-1, 1)
        az = rng.uniform(-1, 1)
        n = np.hypot(ax, az)
        q = np.array([np.cos(ang / 2), np.sin(ang / 2) * ax / n, 0.0, np.sin(ang / 2) * az / n])
        swing = kin.quat_to_mat(q)
        got = kin.yaw_twist(kin.rot_y(yaw) @ swing)
        assert abs(got - yaw) < 1e-9


def test_yaw_twist_equivariance():
    # composing Ry(delta) on the left adds delta to the yaw of any rotation
    rng = np.random.default_rng(17)
    R = random_rotations(50, seed=18)
    base = kin.yaw_twist(R)
    for delta in rng.uniform(-np.pi, np.pi, size=5):
        shifted = kin.yaw_twist(kin.rot_y(delta)[None] @ R)
        diff = (shifted - base - delta + np.pi) % (2 * np.pi) - np.pi
        np.testing.assert_allclose(diff, 0.0, atol=1e-9)


def test_yaw_twist_degenerate_is_zero():
    # half-turn about X has no yaw component
    assert kin.yaw_twist(kin.rot_x(np.pi)) == 0.0


# -- forward kinematics ------------------------------------------------------------

def test_fk_rest_pose_is_cumulative_offsets():
    skel = chain_skeleton([[0, 1, 0], [0, 0.5, 0], [0.2, 0.3, 0]])
    T = 3
    local = np.broadcast_to(np.eye(3), (T, 3, 3, 3)).copy()
    clip = make_clip(skel, local, root_pos=np.tile(skel.offsets[0], (T, 1)))
    pos = kin.forward_kinematics(skel, clip)
    np.testing.assert_allclose(pos[0], skel.rest_positions(), atol=1e-14)


def test_fk_two_joint_z90():
    # unit bone along +Y, root rotated 90 deg about Z -> child at (-1, 0, 0)
    skel = chain_skeleton([[0, 0, 0], [0, 1, 0]])
    local = np.broadcast_to(np.eye(3), (1, 2, 3, 3)).copy()
    local[:, 0] = kin.rot_z(np.pi / 2)
    clip = make_clip(skel, local)
    pos = kin.forward_kinematics(skel, clip)
    np.testing.assert_allclose(pos[0, 1], [-1, 0, 0], atol=1e-12)


def test_fk_translation_equivariance():
    skel = chain_skeleton([[0, 0.9, 0], [0.1, 0.4, 0], [0, 0.4, 0.1]])
    rng = np.random.default_rng(8)
    local = kin.quat_to_mat(rng.standard_normal((4, 3, 4)))
    root_pos = rng.standard_normal((4, 3))
    clip = make_clip(skel, local, root_pos)
    shift = np.array([1.0, -2.0, 3.0])
    clip2 = make_clip(skel, local, root_pos + shift)
    np.testing.assert_allclose(
        kin.forward_kinematics(skel, clip2),
        kin.forward_kinematics(skel, clip) + shift,
        atol=1e-12,
    )


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), joints=st.integers(2, 6))
def test_fk_preserves_bone_lengths(seed, joints):
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-0.5, 0.5, size=(joints, 3))
    skel = chain_skeleton(offsets)
    local = kin.quat_to_mat(rng.standard_normal((3, joints, 4)))
    clip = make_clip(skel, local, rng.standard_normal((3, 3)))
    pos = kin.forward_kinematics(skel, clip)
    for j in range(1, joints):
        lens = np.linalg.norm(pos[:, j] - pos[:, j - 1], axis=-1)
        np.testing.assert_allclose(lens, np.linalg.norm(offsets[j]), atol=1e-12)


# -- canonical frame ------------------------------------------------------------------

def _random_clip(skel, T=5, seed=9, yaw_scale=1.0):
    rng = np.random.default_rng(seed)
    J = skel.joints
    local = kin.quat_to_mat(rng.standard_normal((T, J, 4)))
    root_pos = rng.standard_normal((T, 3)) * np.array([2.0, 0.3, 2.0]) + np.array([0, 1.0, 0])
    return make_clip(skel, local, root_pos)


def test_canonicalize_rigid_invariance():
    skel = chain_skeleton([[0, 0.9, 0], [0.1, 0.4, 0], [0, 0.4, 0.1], [0.2, -0.1, 0]])
    clip = _random_clip(skel)
    res, root = kin.canonicalize(clip, skel)

    ry = kin.rot_y(np.pi / 2)
    shift = np.array([3.0, 0.0, 4.0])
    clip2 = kin.MotionClip(
        fps=clip.fps,
        root_pos=clip.root_pos @ ry.T + shift,
        root_rot=ry @ clip.root_rot,
        local_rot=np.concatenate([(ry @ clip.root_rot)[:, None], clip.local_rot[:, 1:]], axis=1),
    )
    res2, root2 = kin.canonicalize(clip2, skel)
    np.testing.assert_allclose(res2, res, atol=1e-9)
    np.testing.assert_allclose(root2.yaw, (root.yaw + np.pi / 2 + np.pi) % (2 * np.pi) - np.pi, atol=1e-9)


def test_canonicalize_round_trip():
    skel = chain_skeleton([[0, 1, 0], [0.2, 0.3, 0.1], [0, 0.5, 0]])
    clip = _random_clip(skel, T=8, seed=10)
    pos = kin.forward_kinematics(skel, clip)
    res, root = kin.canonicalize(clip, skel)
    back = kin.canonicalize_invert(res, root)
    assert np.abs(back - pos).max() < 1e-9


def test_canonicalize_keeps_height():
    skel = chain_skeleton([[0, 1, 0], [0, 0.5, 0]])
    clip = _random_clip(skel, T=4, seed=11)
    res, root = kin.canonicalize(clip, skel)
    pos = kin.forward_kinematics(skel, clip)
    np.testing.assert_allclose(res[..., 1], pos[..., 1], atol=1e-12)
    np.testing.assert_allclose(root.height, clip.root_pos[:, 1], atol=1e-15)
    np.testing.assert_allclose(res[:, 0, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(res[:, 0, 2], 0.0, atol=1e-12)


# -- velocities -------------------------------------------------------------------------

def test_finite_velocity_constant_zero():
    pos = np.tile(np.array([1.0, 2.0, 3.0]), (5, 2, 1))
    assert np.abs(kin.finite_velocity(pos, 30.0)).max() == 0.0


def test_finite_velocity_linear_exact():
    t = np.arange(6)[:, None] / 30.0
    v = np.array([[0.5, -1.0, 2.0]])
    pos = t * v
    got = kin.finite_velocity(pos, 30.0)
    np.testing.assert_allclose(got, np.tile(v, (6, 1)), atol=1e-12)


def test_finite_velocity_quadratic_oracle():
    fps = 30.0
    t = np.arange(7) / fps
    pos = (t ** 2)[:, None] * np.ones((1, 3))
    got = kin.finite_velocity(pos, fps)
    expect = np.empty_like(pos)
    expect[:-1] = ((pos[1:] - pos[:-1]) * fps)
    expect[-1] = expect[-2]
    np.testing.assert_array_equal(got, expect)


def test_finite_velocity_last_frame_repeats():
    rng = np.random.default_rng(12)
    pos = rng.standard_normal((9, 4, 3))
    v = kin.finite_velocity(pos, 24.0)
    np.testing.assert_array_equal(v[-1], v[-2])


# -- structures ---------------------------------------------------------------------------

def test_topology_rejects_bad_parent():
    with pytest.raises(kin.KinematicsError):
        kin.Topology(names=["a", "b", "c"], parents=np.array([-1, 2, 1]))
    with pytest.raises(kin.KinematicsError):
        kin.Topology(names=["a", "b"], parents=np.array([0, 0]))


def test_skeleton_height():
    skel = chain_skeleton([[0, 1.0, 0], [0, 0.5, 0], [0, -0.2, 0.3]])
    ys = skel.rest_positions()[:, 1]
    assert skel.height == pytest.approx(ys.max() - ys.min())


def test_motion_clip_validation():
    skel = chain_skeleton([[0, 1, 0], [0, 1, 0]])
    local = np.broadcast_to(np.eye(3), (2, 2, 3, 3)).copy()
    clip = make_clip(skel, local)
    clip.validate()
    bad = kin.MotionClip(
        fps=30.0,
        root_pos=np.zeros((2, 3)),
        root_rot=kin.rot_x(np.full(2, 0.5)),
        local_rot=np.broadcast_to(np.eye(3), (2, 2, 3, 3)).copy(),
    )
    with pytest.raises(kin.KinematicsError):
        bad.validate()
