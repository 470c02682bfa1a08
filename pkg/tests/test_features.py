"""Feature codec tests: layout tiling, encode/decode round trips, skeleton
conditions, normalization."""
import numpy as np
import pytest

from skelflow import kinematics as kin
from skelflow.features import (
    FOOT_JOINTS, IDENTITY_6D, FeatureLayout, NormStats, build_skeleton_condition,
    decode_direct, decode_fk, encode,
)
from skelflow.kinematics import MotionClip, forward_kinematics
from skelflow.synthdata import MotionParams, SkeletonParams, make_skeleton, synth_motion


@pytest.fixture(scope="module")
def skel():
    return make_skeleton(SkeletonParams(), joints=16)


@pytest.fixture(scope="module")
def layout():
    return FeatureLayout(16)


def static_tpose(skel, T=5):
    J = skel.joints
    local = np.broadcast_to(np.eye(3), (T, J, 3, 3)).copy()
    root_pos = np.tile(skel.offsets[0], (T, 1))
    return MotionClip(fps=30.0, root_pos=root_pos, root_rot=local[:, 0], local_rot=local)


def walking_clip(skel, fps=30.0):
    return synth_motion(skel, MotionParams(family="walk", duration=2.0), fps)


# -- layout ------------------------------------------------------------------------

def test_layout_dims_desk_and_full():
    assert FeatureLayout(16).total_dim == 8 + 12 * 16 + 12 * 16 == 392
    assert FeatureLayout(24).total_dim == 8 + 12 * 24 + 12 * 24 == 584


def test_layout_tiles_without_gaps():
    for j in (4, 16, 24):
        FeatureLayout(j).validate()


def test_encode_shapes(skel, layout):
    clip = walking_clip(skel)
    feat = encode(clip, skel, layout)
    assert feat.shape == (clip.frames, 392)
    full = make_skeleton(SkeletonParams(), joints=24)
    feat24 = encode(walking_clip(full), full, FeatureLayout(24))
    assert feat24.shape[1] == 584


# -- static pose -------------------------------------------------------------------

def test_static_tpose_encode(skel, layout):
    feat = encode(static_tpose(skel), skel, layout)
    # zero root velocities
    assert np.abs(feat[:, 0:3]).max() == 0.0
    # height equals rest root height
    np.testing.assert_allclose(feat[:, 3], skel.offsets[0, 1], atol=1e-12)
    # identity rotation codes in the gen block
    rot = layout.gen_view(feat, "gen_rot6d", 6)
    np.testing.assert_allclose(rot, np.broadcast_to(IDENTITY_6D, rot.shape), atol=1e-12)
    # ret block equals the skeleton condition on every frame
    cond = build_skeleton_condition(skel, layout)
    a, b = layout.ranges["ret"]
    for t in range(feat.shape[0]):
        np.testing.assert_allclose(feat[t, a:b], cond.vector, atol=1e-12)


def test_translated_clip_same_canonical_channels(skel, layout):
    clip = walking_clip(skel)
    feat = encode(clip, skel, layout)
    moved = MotionClip(
        fps=clip.fps,
        root_pos=clip.root_pos + np.array([5.0, 0.0, -2.0]),
        root_rot=clip.root_rot,
        local_rot=clip.local_rot,
    )
    feat2 = encode(moved, skel, layout)
    np.testing.assert_allclose(feat2, feat, atol=1e-9)


# -- decode round trips ---------------------------------------------------------------

def test_decode_direct_round_trip(skel, layout):
    clip = walking_clip(skel)
    feat = encode(clip, skel, layout)
    pos = forward_kinematics(skel, clip)
    got = decode_direct(feat, layout, clip.fps, origin=clip.root_pos[0, [0, 2]])
    assert np.abs(got - pos).max() < 1e-6


def test_decode_fk_round_trip(skel, layout):
    clip = walking_clip(skel)
    feat = encode(clip, skel, layout)
    pos = forward_kinematics(skel, clip)
    back = decode_fk(feat, skel, layout, clip.fps, origin=clip.root_pos[0, [0, 2]])
    got = forward_kinematics(skel, back)
    assert np.abs(got - pos).max() < 1e-6
    back.validate()


def test_decode_direct_ignores_rotation_channels(skel, layout):
    """Position decoding reads only position/velocity channels plus the root
    rotation slot; corrupting every other rotation slot changes nothing."""
    clip = walking_clip(skel)
    feat = encode(clip, skel, layout)
    base = decode_direct(feat, layout, clip.fps)
    corrupted = feat.copy()
    rng = np.random.default_rng(0)
    ret = layout.ret_view(corrupted)
    ret[:, 1:, 3:9] = rng.standard_normal(ret[:, 1:, 3:9].shape)
    a, b = layout.ranges["gen_rot6d"]
    corrupted[:, a:b] = rng.standard_normal((feat.shape[0], b - a))
    got = decode_direct(corrupted, layout, clip.fps)
    np.testing.assert_array_equal(got, base)


def test_decode_fk_bone_lengths_scaled_skeleton(layout):
    """Decoding onto a 1.1x-scaled skeleton restores that skeleton's bone
    lengths exactly, regardless of what the features said."""
    skel = make_skeleton(SkeletonParams(), 16)
    clip = walking_clip(skel)
    feat = encode(clip, skel, layout)
    big = kin.Skeleton(skel.topology, skel.offsets * 1.1)
    back = decode_fk(feat, big, layout, clip.fps)
    pos = forward_kinematics(big, back)
    parents = big.topology.parents
    for j in range(1, big.joints):
        lens = np.linalg.norm(pos[:, j] - pos[:, parents[j]], axis=-1)
        np.testing.assert_allclose(lens, np.linalg.norm(big.offsets[j]), atol=1e-9)


def test_contacts_binary_and_plausible(skel, layout):
    feat = encode(walking_clip(skel), skel, layout)
    contacts = feat[:, 4:8]
    assert set(np.unique(contacts)).issubset({0.0, 1.0})
    # a walking clip has some contact and some swing
    assert 0.0 < contacts.mean() < 1.0


# -- skeleton condition ----------------------------------------------------------------

def test_skeleton_condition_structure(skel, layout):
    cond = build_skeleton_condition(skel, layout).vector.reshape(16, 12)
    np.testing.assert_allclose(cond[:, 3:9], np.broadcast_to(IDENTITY_6D, (16, 6)), atol=1e-15)
    assert np.abs(cond[:, 9:12]).max() == 0.0
    rest = skel.rest_positions()
    np.testing.assert_allclose(cond[:, 0:3], rest, atol=1e-12)  # canonical rest has zero planar root


def test_skeleton_condition_arm_scale_isolation(layout):
    base = build_skeleton_condition(make_skeleton(SkeletonParams(), 16), layout).vector
    scaled = build_skeleton_condition(make_skeleton(SkeletonParams(arms=1.3), 16), layout).vector
    diff = np.abs(base - scaled).reshape(16, 12)
    skel = make_skeleton(SkeletonParams(), 16)
    arm_joints = {i for i, n in enumerate(skel.topology.names) if "shoulder" in n or "elbow" in n or "hand" in n}
    for j in range(16):
        if j in arm_joints:
            assert diff[j].max() > 1e-6
        else:
            assert diff[j].max() == 0.0


# -- normalization ------------------------------------------------------------------------

def test_norm_stats_round_trip(skel, layout):
    feats = [encode(walking_clip(skel), skel, layout)]
    stats = NormStats.fit(feats, layout)
    x = feats[0]
    np.testing.assert_allclose(stats.invert(stats.apply(x)), x, atol=1e-12)


def test_norm_stats_constant_channel_zero(skel, layout):
    feats = [encode(static_tpose(skel, T=30), skel, layout)]
    stats = NormStats.fit(feats, layout)
    normed = stats.apply(feats[0])
    # every channel of a constant clip is constant -> ~zero after
    # normalization (the std floor amplifies mean rounding, so not exact),
    # except contacts which pass through untouched
    a, b = layout.ranges["contacts"]
    masked = normed.copy()
    masked[:, a:b] = 0.0
    assert np.abs(masked).max() < 1e-8
    np.testing.assert_array_equal(normed[:, a:b], feats[0][:, a:b])


def test_norm_stats_contacts_untouched(skel, layout):
    feats = [encode(walking_clip(skel), skel, layout)]
    stats = NormStats.fit(feats, layout)
    a, b = layout.ranges["contacts"]
    np.testing.assert_array_equal(stats.mean[a:b], 0.0)
    np.testing.assert_array_equal(stats.std[a:b], 1.0)
    np.testing.assert_array_equal(stats.apply(feats[0])[:, a:b], feats[0][:, a:b])


def test_norm_stats_unit_scale_after_apply(skel, layout):
    clips = [synth_motion(skel, MotionParams(family=f, duration=2.0), 30.0)
             for f in ("walk", "wave", "squat")]
    feats = [encode(c, skel, layout) for c in clips]
    stats = NormStats.fit(feats, layout)
    normed = np.concatenate([stats.apply(f) for f in feats], axis=0)
    live = normed.std(axis=0) > 1e-9
    a, b = layout.ranges["contacts"]
    live[a:b] = False  # contacts pass through unnormalized
    np.testing.assert_allclose(normed.mean(axis=0)[live], 0.0, atol=1e-9)
    np.testing.assert_allclose(normed.std(axis=0)[live], 1.0, atol=1e-6)


def test_skeleton_condition_normalization_matches_tpose(skel, layout):
    """Normalized skeleton condition == normalized ret block of the static
    T-pose: the condition lives in the same semantic space as the data."""
    feats = [encode(walking_clip(skel), skel, layout)]
    stats = NormStats.fit(feats, layout)
    cond = build_skeleton_condition(skel, layout)
    a, b = layout.ranges["ret"]
    tpose = encode(static_tpose(skel), skel, layout)[0, a:b]
    np.testing.assert_allclose(
        stats.apply_skeleton(cond, layout),
        (tpose - stats.mean[a:b]) / stats.std[a:b],
        atol=1e-12,
    )
