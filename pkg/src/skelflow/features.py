"""Motion feature codec: dual-block vectors, skeleton conditions, normalization.

Each frame is a concatenation of two blocks over the same pose:

  gen block (8 + 12J channels)
    [0]      root yaw angular velocity (rad/s, canonical-frame)
    [1:3]    root planar velocity (x, z in the current canonical frame)
    [3]      root height
    [4:8]    foot contacts (l_heel, l_toe, r_heel, r_toe), binary
    [8:8+6J]   local joint rotations, 6D code
    [..:+3J]   canonical root-relative joint positions
    [..:+3J]   velocities of those positions

  ret block (12J channels, per-joint-major [p(3); r6d(6); v(3)])
    positions/velocities are canonical like the gen block; the 6D slots
    hold *world-frame* global rotations, so the root slot carries the
    absolute root rotation and decoding never integrates yaw.

The decode paths recover the root trajectory from the ret-root rotation
(yaw read directly) plus integrated gen planar velocities; the planar
starting point is not representable in the features and is supplied by the
caller (origin).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .kinematics import (
    KinematicsError, MotionClip, Skeleton, canonicalize, finite_velocity,
    forward_kinematics, global_rotations, rot6d_decode, rot6d_encode, rot_y,
    yaw_twist,
)

__all__ = [
    "FeatureLayout", "SkeletonCondition", "NormStats",
    "encode", "decode_direct", "decode_fk", "build_skeleton_condition",
    "IDENTITY_6D", "FOOT_JOINTS",
]

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
FOOT_JOINTS = ("l_foot", "r_foot")

# Contact thresholds, scaled by skeleton height / reference height. Height is
# the discriminating gate: the closed-form gait has no planted-foot phase, so
# foot speed never approaches zero and the speed gate only vetoes fast swing.
_REF_HEIGHT = 1.34
_CONTACT_SPEED = 2.0
_CONTACT_HEIGHT = 0.06
_TOE_LOCAL = np.array([0.0, -0.04, 0.10])


@dataclass(frozen=True)
class FeatureLayout:
    """Channel bookkeeping for a J-joint feature vector."""

    joints: int

    @property
    def gen_dim(self) -> int:
        return 8 + 12 * self.joints

    @property
    def ret_dim(self) -> int:
        return 12 * self.joints

    @property
    def total_dim(self) -> int:
        return self.gen_dim + self.ret_dim

    @property
    def ranges(self) -> Dict[str, Tuple[int, int]]:
        j = self.joints
        r = {
            "root_yaw_vel": (0, 1),
            "root_planar_vel": (1, 3),
            "root_height": (3, 4),
            "contacts": (4, 8),
            "gen_rot6d": (8, 8 + 6 * j),
            "gen_pos": (8 + 6 * j, 8 + 9 * j),
            "gen_vel": (8 + 9 * j, 8 + 12 * j),
            "ret": (self.gen_dim, self.total_dim),
        }
        return r

    def channel_range(self, name: str) -> Tuple[int, int]:
        return self.ranges[name]

    def validate(self) -> None:
        """Ranges must tile [0, total_dim) without gap or overlap."""
        spans = sorted(self.ranges.values())
        cursor = 0
        for a, b in spans:
            if a != cursor or b <= a:
                raise KinematicsError(f"feature ranges do not tile: gap/overlap at {a}")
            cursor = b
        if cursor != self.total_dim:
            raise KinematicsError("feature ranges do not cover the full vector")

    # ret block helpers ------------------------------------------------------
    def ret_view(self, feat: np.ndarray) -> np.ndarray:
        """View of the ret block shaped (..., J, 12)."""
        a, b = self.ranges["ret"]
        return feat[..., a:b].reshape(feat.shape[:-1] + (self.joints, 12))

    def gen_view(self, feat: np.ndarray, name: str, per_joint: int) -> np.ndarray:
        a, b = self.ranges[name]
        return feat[..., a:b].reshape(feat.shape[:-1] + (self.joints, per_joint))


@dataclass
class SkeletonCondition:
    """Static skeleton descriptor living in the ret-block feature space."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise KinematicsError("skeleton condition must be a flat vector")


def build_skeleton_condition(skel: Skeleton, layout: FeatureLayout) -> SkeletonCondition:
    """T-pose snapshot: cumulative offsets as canonical positions, identity
    rotation codes, zero velocities. Equals the ret block of a static
    T-pose clip frame."""
    if skel.joints != layout.joints:
        raise KinematicsError("skeleton/layout joint count mismatch")
    rest = skel.rest_positions()
    rest = rest.copy()
    rest[:, 0] -= rest[0, 0]
    rest[:, 2] -= rest[0, 2]
    vec = np.zeros((layout.joints, 12))
    vec[:, 0:3] = rest
    vec[:, 3:9] = IDENTITY_6D
    return SkeletonCondition(vec.reshape(-1))


# -- contacts ---------------------------------------------------------------------

def _foot_contacts(skel: Skeleton, pos: np.ndarray, grot: np.ndarray, fps: float) -> np.ndarray:
    """Binary heel/toe contacts per foot from point speed and height.

    Skeletons without named foot joints get all-zero contact channels.
    """
    T = pos.shape[0]
    out = np.zeros((T, 4))
    names = skel.topology.names
    scale = skel.height / _REF_HEIGHT
    col = 0
    for foot_name in FOOT_JOINTS:
        if foot_name not in names:
            col += 2
            continue
        j = names.index(foot_name)
        heel = pos[:, j]
        toe = heel + np.einsum("tab,b->ta", grot[:, j], _TOE_LOCAL * scale)
        for point in (heel, toe):
            speed = np.linalg.norm(finite_velocity(point, fps), axis=-1)
            low = point[:, 1] < _CONTACT_HEIGHT * scale
            slow = speed < _CONTACT_SPEED * scale
            out[:, col] = (low & slow).astype(np.float64)
            col += 1
    return out


# -- encode ----------------------------------------------------------------------

def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def encode(clip: MotionClip, skel: Skeleton, layout: FeatureLayout) -> np.ndarray:
    """Motion -> (T, D) feature matrix."""
    if clip.joints != layout.joints:
        raise KinematicsError("clip/layout joint count mismatch")
    T = clip.frames
    residual, root = canonicalize(clip, skel)
    grot = global_rotations(skel, clip)
    pos = forward_kinematics(skel, clip)

    feat = np.zeros((T, layout.total_dim))

    # root channels
    if T >= 2:
        dyaw = _wrap_angle(root.yaw[1:] - root.yaw[:-1]) * clip.fps
        feat[:-1, 0] = dyaw
        feat[-1, 0] = dyaw[-1] if T >= 2 else 0.0
        dplanar = (root.planar[1:] - root.planar[:-1]) * clip.fps
        # express in the canonical frame of the earlier frame
        c = np.cos(-root.yaw[:-1])
        s = np.sin(-root.yaw[:-1])
        vx = c * dplanar[:, 0] + s * dplanar[:, 1]
        vz = -s * dplanar[:, 0] + c * dplanar[:, 1]
        feat[:-1, 1] = vx
        feat[:-1, 2] = vz
        feat[-1, 1:3] = feat[-2, 1:3]
    feat[:, 3] = root.height
    feat[:, 4:8] = _foot_contacts(skel, pos, grot, clip.fps)

    j = layout.joints
    feat[:, 8:8 + 6 * j] = rot6d_encode(clip.local_rot).reshape(T, -1)
    a, _ = layout.ranges["gen_pos"]
    feat[:, a:a + 3 * j] = residual.reshape(T, -1)
    a, _ = layout.ranges["gen_vel"]
    feat[:, a:a + 3 * j] = finite_velocity(residual, clip.fps).reshape(T, -1)

    ret = layout.ret_view(feat)
    ret[:, :, 0:3] = residual
    ret[:, :, 3:9] = rot6d_encode(grot)
    ret[:, :, 9:12] = finite_velocity(residual, clip.fps)
    return feat


# -- decode ----------------------------------------------------------------------

def _integrate_root(feat: np.ndarray, layout: FeatureLayout, fps: float,
                    origin: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """(planar trajectory (T, 2), yaw (T,)) from ret-root rotation + gen
    planar velocities. Yaw is read per frame, never integrated."""
    ret = layout.ret_view(feat)
    root_rot = rot6d_decode(ret[:, 0, 3:9])
    yaw = yaw_twist(root_rot)
    T = feat.shape[0]
    planar = np.zeros((T, 2))
    planar[0] = np.asarray(origin, dtype=np.float64)
    c = np.cos(yaw)
    s = np.sin(yaw)
    vx = feat[:, 1]
    vz = feat[:, 2]
    # world velocity = Ry(yaw) @ [vx, 0, vz]
    wx = c * vx + s * vz
    wz = -s * vx + c * vz
    for t in range(T - 1):
        planar[t + 1, 0] = planar[t, 0] + wx[t] / fps
        planar[t + 1, 1] = planar[t, 1] + wz[t] / fps
    return planar, yaw


def decode_direct(feat: np.ndarray, layout: FeatureLayout, fps: float,
                  origin: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Feature matrix -> global joint positions, straight from the position
    channels (bone lengths are whatever the network predicted)."""
    planar, yaw = _integrate_root(feat, layout, fps, origin)
    ret = layout.ret_view(feat)
    residual = ret[:, :, 0:3]
    ry = rot_y(yaw)
    pos = np.einsum("tab,tjb->tja", ry, residual)
    pos[..., 0] += planar[:, None, 0]
    pos[..., 2] += planar[:, None, 1]
    return pos


def decode_fk(feat: np.ndarray, skel: Skeleton, layout: FeatureLayout, fps: float,
              origin: Sequence[float] = (0.0, 0.0)) -> MotionClip:
    """Feature matrix -> MotionClip via the rotation channels.

    Global rotations are Gram-Schmidt decoded, converted to parent-relative
    ones, and FK against the given skeleton restores exact bone lengths.
    """
    if skel.joints != layout.joints:
        raise KinematicsError("skeleton/layout joint count mismatch")
    planar, yaw = _integrate_root(feat, layout, fps, origin)
    ret = layout.ret_view(feat)
    grot = rot6d_decode(ret[:, :, 3:9].reshape(-1, 6)).reshape(feat.shape[0], layout.joints, 3, 3)
    parents = skel.topology.parents
    local = np.empty_like(grot)
    local[:, 0] = grot[:, 0]
    for j in range(1, layout.joints):
        p = parents[j]
        local[:, j] = np.swapaxes(grot[:, p], -1, -2) @ grot[:, j]
    root_pos = np.stack([planar[:, 0], ret[:, 0, 1], planar[:, 1]], axis=-1)
    return MotionClip(fps=fps, root_pos=root_pos, root_rot=grot[:, 0], local_rot=local)


# -- normalization ------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-channel mean/std in feature space.

    Contact channels are left untouched (mean 0, std 1); stds are floored
    at 1e-6 so constant channels normalize to exactly zero.
    """

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise KinematicsError("norm stats must be flat vectors of equal length")
        if np.any(self.std < self.STD_FLOOR):
            raise KinematicsError("norm std below floor")

    @classmethod
    def fit(cls, features: Sequence[np.ndarray], layout: FeatureLayout) -> "NormStats":
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
        if stacked.shape[1] != layout.total_dim:
            raise KinematicsError("features do not match layout width")
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), cls.STD_FLOOR)
        a, b = layout.ranges["contacts"]
        mean[a:b] = 0.0
        std[a:b] = 1.0
        return cls(mean=mean, std=std)

    def apply(self, feat: np.ndarray) -> np.ndarray:
        return (np.asarray(feat, dtype=np.float64) - self.mean) / self.std

    def invert(self, feat: np.ndarray) -> np.ndarray:
        return np.asarray(feat, dtype=np.float64) * self.std + self.mean

    def apply_skeleton(self, cond: SkeletonCondition, layout: FeatureLayout) -> np.ndarray:
        """Normalize a skeleton condition with the ret-block statistics, so a
        zeroed (dropped) condition sits at the dataset mean pose."""
        a, b = layout.ranges["ret"]
        return (cond.vector - self.mean[a:b]) / self.std[a:b]
