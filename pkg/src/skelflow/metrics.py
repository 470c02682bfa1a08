"""Retargeting metrics: height-normalized position error, bone-length
conformity, and the rotation-copy baseline.

Position errors are computed in world frame after rigidly aligning the
first-frame root planar position (and optionally heading) of prediction
and reference; without that, phase offsets in canonicalized trajectories
dominate the number. Vertical placement is never altered by alignment.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .kinematics import (KinematicsError, MotionClip, Skeleton,
                         forward_kinematics, rot_y, yaw_twist)

__all__ = [
    "height_normalized_mse", "align_to_first_frame", "copy_baseline",
    "bone_length_error", "RetargetReport", "evaluate_retarget_pair",
]


def height_normalized_mse(pred: np.ndarray, gt: np.ndarray, height: float) -> float:
    """Mean squared position error over frames, joints, and axes, with
    coordinates divided by the character height; reported x 10^3."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("position arrays differ in shape")
    if not height > 0.0:
        raise ValueError("height must be positive")
    d = (pred - gt) / float(height)
    return float(np.mean(d * d) * 1e3)


def align_to_first_frame(pos: np.ndarray, ref_pos: np.ndarray,
                         yaw: Optional[float] = None,
                         ref_yaw: Optional[float] = None) -> np.ndarray:
    """Rigidly move pos so its first-frame root matches ref_pos in the
    ground plane: rotate about the vertical through the first-frame root by
    (ref_yaw - yaw) when headings are given, then translate in x/z. The y
    channel passes through untouched."""
    pos = np.asarray(pos, dtype=np.float64)
    ref_pos = np.asarray(ref_pos, dtype=np.float64)
    root = pos[0, 0]
    out = pos.copy()
    if yaw is not None and ref_yaw is not None:
        R = rot_y(float(ref_yaw) - float(yaw))
        pivot = np.array([root[0], 0.0, root[2]])
        out = (out - pivot) @ R.T + pivot
    delta = ref_pos[0, 0] - out[0, 0]
    out[..., 0] += delta[0]
    out[..., 2] += delta[2]
    return out


def copy_baseline(clip_src: MotionClip, skel_tgt: Skeleton) -> MotionClip:
    """The naive retarget: keep every joint rotation and the root
    translation, re-render on the target skeleton's bones."""
    if clip_src.joints != skel_tgt.joints:
        raise KinematicsError("copy baseline needs matching joint counts")
    return MotionClip(fps=clip_src.fps, root_pos=clip_src.root_pos.copy(),
                      root_rot=clip_src.root_rot.copy(),
                      local_rot=clip_src.local_rot.copy())


def bone_length_error(pos: np.ndarray, skel: Skeleton) -> float:
    """Mean relative deviation of segment lengths from the skeleton's rest
    bones: mean over frames and non-root joints of | ||p_j - p_parent|| - L_j | / L_j."""
    pos = np.asarray(pos, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[1] != skel.joints or pos.shape[2] != 3:
        raise ValueError(f"positions must be (T, {skel.joints}, 3)")
    lengths = skel.bone_lengths()[1:]
    if np.any(lengths <= 0.0):
        raise KinematicsError("bone-length error undefined for zero-length bones")
    parents = skel.topology.parents[1:]
    seg = np.linalg.norm(pos[:, 1:] - pos[:, parents], axis=-1)
    return float(np.mean(np.abs(seg - lengths) / lengths))


@dataclass
class RetargetReport:
    """Aggregate of per-pair retargeting scores (MSEs x 10^3, bone errors
    as fractions)."""

    mse_direct: float
    mse_fk: float
    mse_copy: float
    bone_len_err_direct: float
    per_pair: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        for v in (self.mse_direct, self.mse_fk, self.mse_copy, self.bone_len_err_direct):
            if v < 0:
                raise ValueError("report metrics must be nonnegative")

    @classmethod
    def from_pairs(cls, per_pair: List[Dict]) -> "RetargetReport":
        if not per_pair:
            raise ValueError("report needs at least one pair")
        mean = lambda k: float(np.mean([p[k] for p in per_pair]))
        return cls(mse_direct=mean("mse_direct"), mse_fk=mean("mse_fk"),
                   mse_copy=mean("mse_copy"),
                   bone_len_err_direct=mean("bone_direct"), per_pair=per_pair)

    def summary(self) -> str:
        return (f"pairs={len(self.per_pair)} mse_direct={self.mse_direct:.3f} "
                f"mse_fk={self.mse_fk:.3f} mse_copy={self.mse_copy:.3f} "
                f"bone_err_direct={self.bone_len_err_direct:.4f}")

    def write_csv(self, path) -> None:
        keys = ["pair", "mse_direct", "mse_fk", "mse_copy", "bone_direct", "bone_fk"]
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            for i, p in enumerate(self.per_pair):
                writer.writerow([p.get("pair", i)] + [repr(float(p[k])) for k in keys[1:]])
            writer.writerow(["mean", repr(self.mse_direct), repr(self.mse_fk),
                             repr(self.mse_copy), repr(self.bone_len_err_direct), ""])


def evaluate_retarget_pair(fk_clip: MotionClip, direct_pos: np.ndarray,
                           src_clip: MotionClip, skel_tgt: Skeleton,
                           gt_clip: MotionClip, pair=None) -> Dict:
    """Score one retargeting: FK decode, direct decode, and the copy
    baseline against the ground-truth clip on the target skeleton."""
    gt_pos = forward_kinematics(skel_tgt, gt_clip)
    ref_yaw = float(yaw_twist(gt_clip.root_rot[0]))
    height = skel_tgt.height

    def aligned_mse(pos: np.ndarray, yaw: Optional[float]) -> float:
        return height_normalized_mse(
            align_to_first_frame(pos, gt_pos, yaw=yaw, ref_yaw=ref_yaw), gt_pos, height)

    fk_pos = forward_kinematics(skel_tgt, fk_clip)
    copy_pos = forward_kinematics(skel_tgt, copy_baseline(src_clip, skel_tgt))
    row = {
        "mse_fk": aligned_mse(fk_pos, float(yaw_twist(fk_clip.root_rot[0]))),
        "mse_direct": aligned_mse(np.asarray(direct_pos, dtype=np.float64), None),
        "mse_copy": aligned_mse(copy_pos, float(yaw_twist(src_clip.root_rot[0]))),
        "bone_direct": bone_length_error(direct_pos, skel_tgt),
        "bone_fk": bone_length_error(fk_pos, skel_tgt),
    }
    if pair is not None:
        row["pair"] = pair
    return row
