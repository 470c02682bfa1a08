"""Skeleton kinematics: rotations, forward kinematics, canonical frames.

Conventions (fixed package-wide):
  * world up is +Y, units are meters, frames are right-handed
  * rotation matrices act on column vectors: p_world = R @ p_local
  * a skeleton's joint j has one parent with parent[j] < j; offsets[j] is
    the rest translation from the parent, offsets[0] is the rest root
    position in world coordinates
  * the 6D rotation code stores the first two columns of the matrix in
    column-major order; decoding re-orthonormalizes with Gram-Schmidt
  * "canonical" positions have root yaw (swing-twist about +Y) and planar
    root translation removed; absolute height is kept
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

__all__ = [
    "Topology", "Skeleton", "MotionClip", "RootMotion", "KinematicsError",
    "rot_x", "rot_y", "rot_z", "quat_to_mat", "mat_to_quat", "yaw_twist",
    "rot6d_encode", "rot6d_decode", "geodesic_angle",
    "forward_kinematics", "global_rotations",
    "canonicalize", "canonicalize_invert", "finite_velocity",
]


class KinematicsError(ValueError):
    pass


# -- structures ---------------------------------------------------------------

@dataclass
class Topology:
    """Joint names plus a parent index table (root first, parent[j] < j)."""

    names: List[str]
    parents: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        if len(self.names) != self.parents.shape[0]:
            raise KinematicsError("names and parents length mismatch")
        if self.parents[0] != -1:
            raise KinematicsError("joint 0 must be the root (parent -1)")
        for j in range(1, self.joints):
            if not (0 <= self.parents[j] < j):
                raise KinematicsError(f"parent[{j}] = {self.parents[j]} violates parent[j] < j")
        if len(set(self.names)) != len(self.names):
            raise KinematicsError("joint names must be unique")

    @property
    def joints(self) -> int:
        return len(self.names)

    def children(self, j: int) -> List[int]:
        return [c for c in range(self.joints) if self.parents[c] == j]


@dataclass
class Skeleton:
    """Topology plus rest offsets in meters."""

    topology: Topology
    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != (self.topology.joints, 3):
            raise KinematicsError(f"offsets shape {self.offsets.shape} != ({self.topology.joints}, 3)")

    @property
    def joints(self) -> int:
        return self.topology.joints

    def rest_positions(self) -> np.ndarray:
        """T-pose joint positions: cumulative offsets down each chain."""
        pos = np.zeros((self.joints, 3))
        pos[0] = self.offsets[0]
        for j in range(1, self.joints):
            pos[j] = pos[self.topology.parents[j]] + self.offsets[j]
        return pos

    @property
    def height(self) -> float:
        """Vertical extent of the T-pose (identity rotations)."""
        ys = self.rest_positions()[:, 1]
        h = float(ys.max() - ys.min())
        if h <= 0:
            raise KinematicsError("degenerate skeleton: zero vertical extent")
        return h

    def bone_lengths(self) -> np.ndarray:
        """Rest bone lengths per non-root joint, indexed 1..J-1 at [j]."""
        lens = np.linalg.norm(self.offsets, axis=-1)
        lens[0] = 0.0
        return lens


@dataclass
class MotionClip:
    """A motion: root trajectory plus parent-relative joint rotations.

    local_rot[:, 0] equals root_rot (the root's parent is the world).
    """

    fps: float
    root_pos: np.ndarray
    root_rot: np.ndarray
    local_rot: np.ndarray

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.root_rot = np.asarray(self.root_rot, dtype=np.float64)
        self.local_rot = np.asarray(self.local_rot, dtype=np.float64)
        t = self.root_pos.shape[0]
        if self.root_pos.shape != (t, 3):
            raise KinematicsError("root_pos must be (T, 3)")
        if self.root_rot.shape != (t, 3, 3):
            raise KinematicsError("root_rot must be (T, 3, 3)")
        if self.local_rot.ndim != 4 or self.local_rot.shape[0] != t or self.local_rot.shape[2:] != (3, 3):
            raise KinematicsError("local_rot must be (T, J, 3, 3)")
        if self.fps <= 0:
            raise KinematicsError("fps must be positive")

    @property
    def frames(self) -> int:
        return self.root_pos.shape[0]

    @property
    def joints(self) -> int:
        return self.local_rot.shape[1]

    def validate(self, atol: float = 1e-6) -> None:
        if not np.allclose(self.local_rot[:, 0], self.root_rot, atol=atol):
            raise KinematicsError("local_rot[:, 0] must equal root_rot")
        eye = np.eye(3)
        rtr = np.einsum("tjab,tjac->tjbc", self.local_rot, self.local_rot)
        if not np.allclose(rtr, eye, atol=1e-5):
            raise KinematicsError("local_rot contains non-orthonormal matrices")

    def window(self, start: int, frames: int) -> "MotionClip":
        stop = start + frames
        if start < 0 or stop > self.frames:
            raise KinematicsError("window exceeds clip bounds")
        return MotionClip(fps=self.fps, root_pos=self.root_pos[start:stop],
                          root_rot=self.root_rot[start:stop],
                          local_rot=self.local_rot[start:stop])


@dataclass
class RootMotion:
    """Per-frame root transform removed by canonicalization.

    yaw/planar are what invert() re-applies; height records root Y for
    convenience (the residual positions keep absolute height).
    """

    yaw: np.ndarray
    planar: np.ndarray
    height: np.ndarray


# -- elementary rotations -------------------------------------------------------

def _stack_rot(c, s, axis: str) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    out = np.zeros(c.shape + (3, 3))
    if axis == "x":
        out[..., 0, 0] = 1
        out[..., 1, 1] = c
        out[..., 1, 2] = -s
        out[..., 2, 1] = s
        out[..., 2, 2] = c
    elif axis == "y":
        out[..., 1, 1] = 1
        out[..., 0, 0] = c
        out[..., 0, 2] = s
        out[..., 2, 0] = -s
        out[..., 2, 2] = c
    elif axis == "z":
        out[..., 2, 2] = 1
        out[..., 0, 0] = c
        out[..., 0, 1] = -s
        out[..., 1, 0] = s
        out[..., 1, 1] = c
    else:
        raise KinematicsError(f"unknown axis {axis!r}")
    return out


def rot_x(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return _stack_rot(np.cos(theta), np.sin(theta), "x")


def rot_y(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return _stack_rot(np.cos(theta), np.sin(theta), "y")


def rot_z(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return _stack_rot(np.cos(theta), np.sin(theta), "z")


# -- quaternions (w, x, y, z) ----------------------------------------------------

def quat_to_mat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices -> unit quaternions, branch chosen per element."""
    R = np.asarray(R, dtype=np.float64)
    shp = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    n = Rf.shape[0]
    q = np.empty((n, 4))
    tr = Rf[:, 0, 0] + Rf[:, 1, 1] + Rf[:, 2, 2]

    # candidate magnitudes; all >= 0 for orthonormal input
    cand = np.stack([
        1.0 + tr,
        1.0 + Rf[:, 0, 0] - Rf[:, 1, 1] - Rf[:, 2, 2],
        1.0 - Rf[:, 0, 0] + Rf[:, 1, 1] - Rf[:, 2, 2],
        1.0 - Rf[:, 0, 0] - Rf[:, 1, 1] + Rf[:, 2, 2],
    ], axis=1)
    case = np.argmax(cand, axis=1)
    s = 2.0 * np.sqrt(np.maximum(cand[np.arange(n), case], 1e-12))

    m = case == 0
    q[m, 0] = 0.25 * s[m]
    q[m, 1] = (Rf[m, 2, 1] - Rf[m, 1, 2]) / s[m]
    q[m, 2] = (Rf[m, 0, 2] - Rf[m, 2, 0]) / s[m]
    q[m, 3] = (Rf[m, 1, 0] - Rf[m, 0, 1]) / s[m]
    m = case == 1
    q[m, 0] = (Rf[m, 2, 1] - Rf[m, 1, 2]) / s[m]
    q[m, 1] = 0.25 * s[m]
    q[m, 2] = (Rf[m, 0, 1] + Rf[m, 1, 0]) / s[m]
    q[m, 3] = (Rf[m, 0, 2] + Rf[m, 2, 0]) / s[m]
    m = case == 2
    q[m, 0] = (Rf[m, 0, 2] - Rf[m, 2, 0]) / s[m]
    q[m, 1] = (Rf[m, 0, 1] + Rf[m, 1, 0]) / s[m]
    q[m, 2] = 0.25 * s[m]
    q[m, 3] = (Rf[m, 1, 2] + Rf[m, 2, 1]) / s[m]
    m = case == 3
    q[m, 0] = (Rf[m, 1, 0] - Rf[m, 0, 1]) / s[m]
    q[m, 1] = (Rf[m, 0, 2] + Rf[m, 2, 0]) / s[m]
    q[m, 2] = (Rf[m, 1, 2] + Rf[m, 2, 1]) / s[m]
    q[m, 3] = 0.25 * s[m]

    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q.reshape(shp + (4,))


def yaw_twist(R: np.ndarray) -> np.ndarray:
    """Rotation about world +Y via swing-twist decomposition.

    For q = (w, x, y, z) the twist about Y is the normalized (w, 0, y, 0),
    so yaw = 2 atan2(y, w), wrapped to (-pi, pi]. Rotations with no yaw
    component (w ~ y ~ 0, a half-turn about a horizontal axis) get yaw 0.
    """
    q = mat_to_quat(R)
    w, y = q[..., 0], q[..., 2]
    norm = np.hypot(w, y)
    yaw = np.where(norm < 1e-9, 0.0, 2.0 * np.arctan2(y, w))
    return (yaw + np.pi) % (2.0 * np.pi) - np.pi


# -- 6D rotation codec ------------------------------------------------------------

def rot6d_encode(R: np.ndarray) -> np.ndarray:
    """First two columns of R, column-major: (..., 3, 3) -> (..., 6)."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _safe_normalize(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = norm[..., 0] < 1e-8
    out = np.where(bad[..., None], fallback, v / np.maximum(norm, 1e-8))
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def rot6d_decode(sixd: np.ndarray) -> np.ndarray:
    """Gram-Schmidt the two encoded columns back to an orthonormal matrix.

    Always returns a proper rotation, even for degenerate input: collapsed
    columns fall back to fixed axes so downstream FK never sees a
    non-orthonormal matrix.
    """
    sixd = np.asarray(sixd, dtype=np.float64)
    a = sixd[..., 0:3]
    b = sixd[..., 3:6]
    ex = np.broadcast_to(np.array([1.0, 0.0, 0.0]), a.shape)
    c0 = _safe_normalize(a, ex)
    b_proj = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    # fallback must not be parallel to c0: pick the world axis least aligned
    alt = np.where(
        (np.abs(c0[..., 1:2]) < 0.9),
        np.broadcast_to(np.array([0.0, 1.0, 0.0]), a.shape),
        np.broadcast_to(np.array([0.0, 0.0, 1.0]), a.shape),
    )
    alt = alt - np.sum(c0 * alt, axis=-1, keepdims=True) * c0
    c1 = _safe_normalize(b_proj, alt)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Angle of Ra^T Rb in radians (rotation distance)."""
    rel = np.einsum("...ba,...bc->...ac", Ra, Rb)
    tr = rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2]
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


# -- forward kinematics -------------------------------------------------------------

def global_rotations(skel: Skeleton, clip: MotionClip) -> np.ndarray:
    """World-frame rotation per joint: parent-global composed with local."""
    parents = skel.topology.parents
    J = skel.joints
    out = np.empty((clip.frames, J, 3, 3))
    out[:, 0] = clip.local_rot[:, 0]
    for j in range(1, J):
        out[:, j] = out[:, parents[j]] @ clip.local_rot[:, j]
    return out


def forward_kinematics(skel: Skeleton, clip: MotionClip) -> np.ndarray:
    """Global joint positions (T, J, 3).

    pos[j] = pos[parent] + GlobalRot[parent] @ offset[j]; the root takes the
    clip's root translation directly (its rest offset is not re-applied).
    """
    if clip.joints != skel.joints:
        raise KinematicsError(f"clip has {clip.joints} joints, skeleton {skel.joints}")
    parents = skel.topology.parents
    grot = global_rotations(skel, clip)
    pos = np.empty((clip.frames, skel.joints, 3))
    pos[:, 0] = clip.root_pos
    for j in range(1, skel.joints):
        p = parents[j]
        pos[:, j] = pos[:, p] + np.einsum("tab,b->ta", grot[:, p], skel.offsets[j])
    return pos


# -- canonical frame ------------------------------------------------------------------

def canonicalize(clip: MotionClip, skel: Skeleton):
    """Remove planar root translation and root yaw from global positions.

    Returns (residual positions (T, J, 3), RootMotion). Residuals keep
    absolute height; pitch/roll of the root stay in the pose.
    """
    pos = forward_kinematics(skel, clip)
    yaw = yaw_twist(clip.root_rot)
    planar = clip.root_pos[:, [0, 2]].copy()
    height = clip.root_pos[:, 1].copy()
    shifted = pos.copy()
    shifted[..., 0] -= planar[:, None, 0]
    shifted[..., 2] -= planar[:, None, 1]
    unyaw = rot_y(-yaw)
    residual = np.einsum("tab,tjb->tja", unyaw, shifted)
    return residual, RootMotion(yaw=yaw, planar=planar, height=height)


def canonicalize_invert(residual: np.ndarray, root: RootMotion) -> np.ndarray:
    """Re-apply yaw and planar translation: exact inverse of canonicalize."""
    ry = rot_y(root.yaw)
    pos = np.einsum("tab,tjb->tja", ry, residual)
    pos[..., 0] += root.planar[:, None, 0]
    pos[..., 2] += root.planar[:, None, 1]
    return pos


def finite_velocity(pos: np.ndarray, fps: float) -> np.ndarray:
    """Forward-difference velocity scaled by fps; last frame repeats T-2."""
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape[0] < 2:
        return np.zeros_like(pos)
    vel = np.empty_like(pos)
    vel[:-1] = (pos[1:] - pos[:-1]) * float(fps)
    vel[-1] = vel[-2]
    return vel
