"""Inversion-free editing of motion windows with a trained flow.

Instead of inverting the sample back to noise, the edit integrates a
difference of guided velocities along a noisy source trajectory
    x~_tau = (1 - tau) eps + tau x,
starting from y = x at tau_min and stepping to 1 - tau_clamp with explicit
Euler:
    y <- y + h * [ v(y + x~ - x, tau; target cond) - v(x~, tau; source cond) ].
Both velocity evaluations inside one step see the same eps; by default a
fresh eps is drawn per step (freezing it for the whole run is a flag).
When source and target conditions and weights coincide the difference field
is identically zero and the input passes through unchanged.

Two instantiations: text editing (same skeleton, prompts differ, asymmetric
text guidance) and intra-structural retargeting (empty prompts, skeleton
descriptors differ, start step chosen by a small sweep). Euler rather than
RK4 because the field is redrawn-noise stochastic; smoothness across a step
is not available. Transport runs in normalized feature space; decoding
happens once at the end.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .features import (FeatureLayout, NormStats, build_skeleton_condition,
                       decode_direct, decode_fk)
from .kinematics import (KinematicsError, MotionClip, Skeleton,
                         forward_kinematics, yaw_twist)
from .flow import (TAU_CLAMP, ConditionSet, GuidanceWeights,
                   compose_velocities, guidance_branches, pred_to_velocity)
from .metrics import align_to_first_frame, bone_length_error, height_normalized_mse
from .model import ModelConfig, model_forward
from .synthdata import PromptTokens, padding_prompt

__all__ = [
    "EditConfig", "TransportTrace", "EditResult", "RetargetResult",
    "noisy_source", "transport", "edit_text", "retarget",
    "EDIT_SOURCE_WEIGHTS", "EDIT_TARGET_WEIGHTS", "RETARGET_WEIGHTS",
    "RETARGET_SWEEP",
]

EDIT_SOURCE_WEIGHTS = GuidanceWeights(text=1.5, skel=1.0, both=0.0)
EDIT_TARGET_WEIGHTS = GuidanceWeights(text=3.5, skel=1.0, both=0.0)
RETARGET_WEIGHTS = GuidanceWeights(text=0.0, skel=1.0, both=0.0)
RETARGET_SWEEP = (5, 10, 15, 20, 25, 30, 35, 40)


@dataclass(frozen=True)
class EditConfig:
    """Transport schedule and per-side guidance. tau_min is where editing
    starts on the global `steps`-point schedule (start step k maps to
    tau_min = k / steps); smaller tau_min injects more noise and edits more
    aggressively."""

    tau_min: float = 0.1
    steps: int = 100
    w_src: GuidanceWeights = EDIT_SOURCE_WEIGHTS
    w_tgt: GuidanceWeights = EDIT_TARGET_WEIGHTS
    seed: int = 0
    frozen_noise: bool = False
    tau_clamp: float = TAU_CLAMP

    def __post_init__(self):
        if not 0.0 <= self.tau_min < 1.0:
            raise ValueError("tau_min must be in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.tau_clamp <= 0.1:
            raise ValueError("tau_clamp must be in (0, 0.1]")
        if self.start_step >= self.steps:
            raise ValueError("tau_min leaves no integration steps")

    @property
    def start_step(self) -> int:
        return int(round(self.tau_min * self.steps))


@dataclass(frozen=True, eq=False)
class TransportTrace:
    """Per-step record of the integration: evaluation times, the norm of the
    velocity difference, the step size, and optional y snapshots."""

    taus: np.ndarray
    delta_norms: np.ndarray
    h: float
    snapshots: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "taus", np.asarray(self.taus, dtype=np.float64))
        object.__setattr__(self, "delta_norms", np.asarray(self.delta_norms, dtype=np.float64))
        if self.taus.shape != self.delta_norms.shape or self.taus.ndim != 1:
            raise ValueError("trace arrays must be matching 1-D")
        if self.taus.size > 1 and not np.all(np.diff(self.taus) > 0):
            raise ValueError("trace times must increase monotonically")

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau", "delta_norm"])
            for t, d in zip(self.taus, self.delta_norms):
                writer.writerow([repr(float(t)), repr(float(d))])


def noisy_source(x: np.ndarray, tau: float, eps: np.ndarray) -> np.ndarray:
    """Noisy source trajectory (1 - tau) eps + tau x."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError("noise shape must match the window")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    return (1.0 - tau) * eps + tau * x


def _two_sided_velocity(params: Dict[str, Tensor], mcfg: ModelConfig,
                        z_tgt: np.ndarray, x_tilde: np.ndarray, tau: float,
                        c_tgt: ConditionSet, c_src: ConditionSet,
                        w_tgt: GuidanceWeights, w_src: GuidanceWeights,
                        tau_clamp: float) -> np.ndarray:
    """v(z_tgt; target) - v(x_tilde; source) with every surviving branch of
    both sides stacked into a single forward pass."""
    live_tgt = guidance_branches(c_tgt, w_tgt)
    live_src = guidance_branches(c_src, w_src)
    states = [z_tgt] * len(live_tgt) + [x_tilde] * len(live_src)
    conds = [br for _, br in live_tgt] + [br for _, br in live_src]
    big_x = np.stack(states)
    tokens = np.concatenate([c.tokens for c in conds], axis=0)
    skels = np.concatenate([c.skel for c in conds], axis=0)
    taus = np.full(big_x.shape[0], float(tau))
    with ad.no_grad():
        pred = model_forward(params, big_x, taus, tokens, skels, mcfg).data
    vel = pred_to_velocity(pred, big_x, taus, tau_clamp)
    n_tgt = len(live_tgt)
    v_tgt = compose_velocities([c for c, _ in live_tgt], list(vel[:n_tgt]))
    v_src = compose_velocities([c for c, _ in live_src], list(vel[n_tgt:]))
    return v_tgt - v_src


def transport(params: Dict[str, Tensor], mcfg: ModelConfig, x: np.ndarray,
              c_src: ConditionSet, c_tgt: ConditionSet, cfg: EditConfig,
              keep_snapshots: bool = False) -> Tuple[np.ndarray, TransportTrace]:
    """Integrate the difference field from tau_min to 1 - tau_clamp.

    x is one normalized window (T, D); both condition sets must be batch 1.
    Returns the transported window and the step trace.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("transport expects a single (T, D) window")
    if c_src.batch != 1 or c_tgt.batch != 1:
        raise ValueError("transport conditions must be batch 1")
    n = cfg.steps - cfg.start_step
    h = (1.0 - cfg.tau_clamp - cfg.tau_min) / n
    rng = np.random.default_rng(cfg.seed)
    eps_frozen = rng.standard_normal(x.shape) if cfg.frozen_noise else None

    y = x.copy()
    taus = np.empty(n)
    deltas = np.empty(n)
    snaps = np.empty((n,) + x.shape) if keep_snapshots else None
    for j in range(n):
        tau = cfg.tau_min + j * h
        eps = eps_frozen if cfg.frozen_noise else rng.standard_normal(x.shape)
        x_tilde = noisy_source(x, tau, eps)
        # offset form: when y == x the target state is x_tilde bitwise, so
        # identical conditions cancel exactly instead of to rounding error
        z_tgt = x_tilde + (y - x)
        dv = _two_sided_velocity(params, mcfg, z_tgt, x_tilde, tau,
                                 c_tgt, c_src, cfg.w_tgt, cfg.w_src,
                                 cfg.tau_clamp)
        if not np.all(np.isfinite(dv)):
            raise NumericsError(f"non-finite transport velocity at step {j} (tau={tau:.4f})")
        y = y + h * dv
        taus[j] = tau
        deltas[j] = float(np.linalg.norm(dv))
        if snaps is not None:
            snaps[j] = y
    return y, TransportTrace(taus=taus, delta_norms=deltas, h=h, snapshots=snaps)


@dataclass(frozen=True, eq=False)
class EditResult:
    clip: MotionClip
    features: np.ndarray          # raw feature space, post-edit
    trace: TransportTrace


def edit_text(params: Dict[str, Tensor], mcfg: ModelConfig, layout: FeatureLayout,
              norm: NormStats, features: np.ndarray, prompt_src: PromptTokens,
              prompt_tgt: PromptTokens, skel: Skeleton,
              cfg: Optional[EditConfig] = None, fps: float = 30.0) -> EditResult:
    """Zero-shot text edit: the skeleton stays fixed, only the prompt
    changes between the two velocity branches. features are one raw-space
    window (T, D); the result decodes through FK against the same skeleton,
    so bone lengths are preserved exactly."""
    cfg = cfg or EditConfig()
    svec = norm.apply_skeleton(build_skeleton_condition(skel, layout), layout)
    c_src = ConditionSet.single(prompt_src, svec)
    c_tgt = ConditionSet.single(prompt_tgt, svec)
    y, trace = transport(params, mcfg, norm.apply(features), c_src, c_tgt, cfg)
    raw = norm.invert(y)
    return EditResult(clip=decode_fk(raw, skel, layout, fps), features=raw, trace=trace)


@dataclass(frozen=True, eq=False)
class RetargetResult:
    clip_fk: MotionClip           # rotations + target bones (exact lengths)
    direct_positions: np.ndarray  # (T, J, 3) from the position channels
    features: np.ndarray          # raw feature space, post-transport
    start_step: int
    tau_min: float
    sweep_scores: List[Tuple[int, float]]
    trace: TransportTrace


def retarget(params: Dict[str, Tensor], mcfg: ModelConfig, layout: FeatureLayout,
             norm: NormStats, features: np.ndarray, skel_src: Skeleton,
             skel_tgt: Skeleton, steps: int = 100,
             sweep: Sequence[int] = RETARGET_SWEEP, seed: int = 0,
             gt_clip: Optional[MotionClip] = None, frozen_noise: bool = False,
             fps: float = 30.0) -> RetargetResult:
    """Zero-shot intra-structural retargeting: prompts stay empty, the
    skeleton descriptor changes between branches, and skeleton guidance is
    1.0 on both sides.

    The start step sweeps `sweep` (of `steps`); each candidate is scored by
    height-normalized MSE against gt_clip rendered on the target skeleton
    when it is given, otherwise by the direct decode's bone-length deviation
    from the target skeleton. The best candidate's decode is returned, both
    ways: FK (exact bones) and direct positions.
    """
    if skel_src.joints != skel_tgt.joints or not np.array_equal(
            skel_src.topology.parents, skel_tgt.topology.parents):
        raise KinematicsError("retargeting requires identical topologies")
    pad = padding_prompt(mcfg.prompt_len)
    c_src = ConditionSet.single(pad, norm.apply_skeleton(
        build_skeleton_condition(skel_src, layout), layout))
    c_tgt = ConditionSet.single(pad, norm.apply_skeleton(
        build_skeleton_condition(skel_tgt, layout), layout))
    x_norm = norm.apply(features)
    gt_pos = forward_kinematics(skel_tgt, gt_clip) if gt_clip is not None else None

    best = None
    scores: List[Tuple[int, float]] = []
    for k in sweep:
        cfg = EditConfig(tau_min=k / steps, steps=steps, w_src=RETARGET_WEIGHTS,
                         w_tgt=RETARGET_WEIGHTS, seed=seed, frozen_noise=frozen_noise)
        y, trace = transport(params, mcfg, x_norm, c_src, c_tgt, cfg)
        raw = norm.invert(y)
        clip_fk = decode_fk(raw, skel_tgt, layout, fps)
        direct = decode_direct(raw, layout, fps)
        if gt_pos is None:
            score = bone_length_error(direct, skel_tgt)
        else:
            pos = forward_kinematics(skel_tgt, clip_fk)
            score = height_normalized_mse(
                align_to_first_frame(pos, gt_pos,
                                     yaw=float(yaw_twist(clip_fk.root_rot[0])),
                                     ref_yaw=float(yaw_twist(gt_clip.root_rot[0]))),
                gt_pos, skel_tgt.height)
        scores.append((k, float(score)))
        if best is None or score < best[0]:
            best = (float(score), k, cfg.tau_min, raw, clip_fk, direct, trace)

    _, k, tau_min, raw, clip_fk, direct, trace = best
    return RetargetResult(clip_fk=clip_fk, direct_positions=direct, features=raw,
                          start_step=k, tau_min=tau_min, sweep_scores=scores,
                          trace=trace)
