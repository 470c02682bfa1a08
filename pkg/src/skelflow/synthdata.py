"""Synthetic skeletons, motions, and prompts for desk-scale experiments.

Motion families are closed-form functions of (skeleton, MotionParams), so
the same MotionParams rendered on a different skeleton *is* the ground-truth
retarget. Joint angles depend only on the params; the root trajectory also
depends on the skeleton: walking speed scales with leg length (stride
proportional to legs at fixed cadence) and standing height follows the leg
chain. That coupling is what makes naive rotation copying measurably wrong.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import FeatureLayout, SkeletonCondition, build_skeleton_condition, encode
from .kinematics import (
    KinematicsError, MotionClip, Skeleton, Topology, forward_kinematics,
    rot_x, rot_y, rot_z,
)

__all__ = [
    "PAD_ID", "VOCAB", "SkeletonParams", "MotionParams", "PromptTokens",
    "DataConfig", "DatasetItem", "DatasetBundle", "FAMILIES",
    "make_skeleton", "synth_motion", "synth_prompt", "padding_prompt",
    "build_dataset", "ground_truth_clip", "ground_truth_positions", "leg_length",
]

FAMILIES = ("walk", "wave", "squat", "turn")

PAD_ID = 0
VOCAB: List[str] = [
    "<pad>", "walk", "wave", "squat", "turn",
    "slow", "steady", "fast", "subtle", "medium", "wide",
    "a", "person", "performs", "motion", "the", "style",
]
_WORD = {w: i for i, w in enumerate(VOCAB)}

_GROUND_CLEARANCE = 0.02


# -- skeleton ----------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonParams:
    """Per-chain limb scale multipliers."""

    arms: float = 1.0
    legs: float = 1.0
    spine: float = 1.0
    neck: float = 1.0


# (name, parent name, offset, chain) tables; root offset is the rest position.
_DESK_JOINTS = [
    ("hips",       None,         (0.00,  0.92, 0.00), "root"),
    ("spine",      "hips",       (0.00,  0.12, 0.00), "spine"),
    ("chest",      "spine",      (0.00,  0.14, 0.00), "spine"),
    ("head",       "chest",      (0.00,  0.20, 0.00), "neck"),
    ("l_shoulder", "chest",      (0.18,  0.10, 0.00), "arms"),
    ("l_elbow",    "l_shoulder", (0.26,  0.00, 0.00), "arms"),
    ("l_hand",     "l_elbow",    (0.24,  0.00, 0.00), "arms"),
    ("r_shoulder", "chest",      (-0.18, 0.10, 0.00), "arms"),
    ("r_elbow",    "r_shoulder", (-0.26, 0.00, 0.00), "arms"),
    ("r_hand",     "r_elbow",    (-0.24, 0.00, 0.00), "arms"),
    ("l_hip",      "hips",       (0.09, -0.06, 0.00), "legs"),
    ("l_knee",     "l_hip",      (0.00, -0.42, 0.00), "legs"),
    ("l_foot",     "l_knee",     (0.00, -0.40, 0.00), "legs"),
    ("r_hip",      "hips",       (-0.09, -0.06, 0.00), "legs"),
    ("r_knee",     "r_hip",      (0.00, -0.42, 0.00), "legs"),
    ("r_foot",     "r_knee",     (0.00, -0.40, 0.00), "legs"),
]

_FULL_JOINTS = [
    ("hips",       None,         (0.00,  0.95, 0.00), "root"),
    ("spine0",     "hips",       (0.00,  0.09, 0.00), "spine"),
    ("spine1",     "spine0",     (0.00,  0.10, 0.00), "spine"),
    ("chest",      "spine1",     (0.00,  0.11, 0.00), "spine"),
    ("neck",       "chest",      (0.00,  0.09, 0.00), "neck"),
    ("head",       "neck",       (0.00,  0.13, 0.00), "neck"),
    ("l_collar",   "chest",      (0.06,  0.06, 0.00), "arms"),
    ("l_shoulder", "l_collar",   (0.13,  0.03, 0.00), "arms"),
    ("l_elbow",    "l_shoulder", (0.26,  0.00, 0.00), "arms"),
    ("l_hand",     "l_elbow",    (0.24,  0.00, 0.00), "arms"),
    ("r_collar",   "chest",      (-0.06, 0.06, 0.00), "arms"),
    ("r_shoulder", "r_collar",   (-0.13, 0.03, 0.00), "arms"),
    ("r_elbow",    "r_shoulder", (-0.26, 0.00, 0.00), "arms"),
    ("r_hand",     "r_elbow",    (-0.24, 0.00, 0.00), "arms"),
    ("l_hip",      "hips",       (0.09, -0.06, 0.00), "legs"),
    ("l_knee",     "l_hip",      (0.00, -0.40, 0.00), "legs"),
    ("l_ankle",    "l_knee",     (0.00, -0.38, 0.00), "legs"),
    ("l_foot",     "l_ankle",    (0.00, -0.05, 0.04), "legs"),
    ("l_toe",      "l_foot",     (0.00, -0.01, 0.09), "legs"),
    ("r_hip",      "hips",       (-0.09, -0.06, 0.00), "legs"),
    ("r_knee",     "r_hip",      (0.00, -0.40, 0.00), "legs"),
    ("r_ankle",    "r_knee",     (0.00, -0.38, 0.00), "legs"),
    ("r_foot",     "r_ankle",    (0.00, -0.05, 0.04), "legs"),
    ("r_toe",      "r_foot",     (0.00, -0.01, 0.09), "legs"),
]


def make_skeleton(params: SkeletonParams = SkeletonParams(), joints: int = 16) -> Skeleton:
    """Canonical humanoid with per-chain scales. joints selects the 16-joint
    desk skeleton or the 24-joint full one. Deterministic in its inputs."""
    if joints == 16:
        table = _DESK_JOINTS
    elif joints == 24:
        table = _FULL_JOINTS
    else:
        raise KinematicsError(f"no canonical skeleton with {joints} joints")
    names = [row[0] for row in table]
    index = {n: i for i, n in enumerate(names)}
    parents = np.array([-1 if row[1] is None else index[row[1]] for row in table])
    scale_of = {"root": 1.0, "spine": params.spine, "neck": params.neck,
                "arms": params.arms, "legs": params.legs}
    offsets = np.array([np.asarray(row[2]) * scale_of[row[3]] for row in table])
    # ground the rest pose: shift the root so the lowest joint keeps the
    # canonical table's ground gap (longer legs lift the whole body)
    skel = Skeleton(Topology(names=names, parents=parents), offsets=offsets)
    table_min = _table_min_rest_y(table)
    offsets[0, 1] += table_min - skel.rest_positions()[:, 1].min()
    return Skeleton(skel.topology, offsets)


def _table_min_rest_y(table) -> float:
    rest = {None: np.zeros(3)}
    low = math.inf
    for name, parent, off, _ in table:
        rest[name] = rest[parent] + np.asarray(off)
        low = min(low, rest[name][1])
    return low


def leg_length(skel: Skeleton) -> float:
    """Hip-to-foot chain length (toes excluded): sets stride and stance height."""
    names = skel.topology.names
    if "l_hip" not in names:
        return skel.height * 0.5
    total = 0.0
    j = names.index("l_hip")
    while True:
        kids = [c for c in skel.topology.children(j) if "toe" not in names[c]]
        if not kids:
            break
        j = kids[0]
        total += float(np.linalg.norm(skel.offsets[j]))
    return total


def _stance_height(skel: Skeleton) -> float:
    """Root height with straight legs and feet just above the ground."""
    rest = skel.rest_positions()
    names = skel.topology.names
    foot_ys = [rest[names.index(n), 1] for n in ("l_foot", "r_foot") if n in names]
    drop = rest[0, 1] - (min(foot_ys) if foot_ys else 0.0)
    return drop + _GROUND_CLEARANCE * skel.height / 1.34


# -- motion ------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionParams:
    """Closed-form motion controls; same params on two skeletons = retarget pair."""

    family: str = "walk"
    speed: float = 1.0        # m/s on the canonical skeleton (walk)
    frequency: float = 1.0    # Hz
    amplitude: float = 1.0    # unitless gain on joint angles
    phase: float = 0.0        # radians
    duration: float = 4.0     # seconds

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KinematicsError(f"unknown motion family {self.family!r}")
        if self.duration <= 0 or self.frequency <= 0:
            raise KinematicsError("duration and frequency must be positive")


_canonical_leg_cache: Dict[int, float] = {}


def _canonical_leg(joints: int) -> float:
    if joints not in _canonical_leg_cache:
        _canonical_leg_cache[joints] = leg_length(make_skeleton(SkeletonParams(), joints))
    return _canonical_leg_cache[joints]


def _set(local: np.ndarray, names: List[str], name: str, R: np.ndarray) -> None:
    if name in names:
        local[:, names.index(name)] = R


def synth_motion(skel: Skeleton, mp: MotionParams, fps: float = 30.0) -> MotionClip:
    """Render a family motion on a skeleton. Joint angles depend only on mp;
    the root trajectory also depends on the skeleton's proportions."""
    T = max(2, int(round(mp.duration * fps)))
    t = np.arange(T) / fps
    ph = 2.0 * math.pi * mp.frequency * t + mp.phase
    names = skel.topology.names
    J = skel.joints

    local = np.broadcast_to(np.eye(3), (T, J, 3, 3)).copy()
    root_pos = np.zeros((T, 3))
    root_rot = np.broadcast_to(np.eye(3), (T, 3, 3)).copy()
    base_y = _stance_height(skel)
    amp = mp.amplitude

    if mp.family == "walk":
        # stride scales with leg length at fixed cadence
        ref = _canonical_leg(skel.joints) if skel.joints in (16, 24) else leg_length(skel)
        v_eff = mp.speed * leg_length(skel) / ref
        hip = 0.5 * amp * np.sin(ph)
        knee_l = 0.6 * amp * 0.5 * (1.0 - np.cos(ph))
        knee_r = 0.6 * amp * 0.5 * (1.0 - np.cos(ph + math.pi))
        _set(local, names, "l_hip", rot_x(hip))
        _set(local, names, "r_hip", rot_x(-hip))
        _set(local, names, "l_knee", rot_x(knee_l))
        _set(local, names, "r_knee", rot_x(knee_r))
        _set(local, names, "l_shoulder", rot_x(-0.35 * amp * np.sin(ph)))
        _set(local, names, "r_shoulder", rot_x(0.35 * amp * np.sin(ph)))
        _set(local, names, "spine", rot_y(0.08 * amp * np.sin(ph)))
        root_pos[:, 2] = v_eff * t
        root_pos[:, 1] = base_y - 0.03 * amp * leg_length(skel) * 0.5 * (1.0 - np.cos(2.0 * ph))
    elif mp.family == "wave":
        raise_ang = np.full(T, 1.2)
        _set(local, names, "l_shoulder", rot_z(raise_ang))
        _set(local, names, "l_elbow", rot_z(0.6 * amp * np.sin(ph) + 0.3))
        _set(local, names, "r_shoulder", rot_z(np.full(T, -0.1)))
        _set(local, names, "head", rot_z(0.06 * amp * np.sin(ph)))
        root_pos[:, 1] = base_y
    elif mp.family == "squat":
        dip = 0.5 * (1.0 - np.cos(ph))
        _set(local, names, "l_hip", rot_x(-0.9 * amp * dip))
        _set(local, names, "r_hip", rot_x(-0.9 * amp * dip))
        _set(local, names, "l_knee", rot_x(1.5 * amp * dip))
        _set(local, names, "r_knee", rot_x(1.5 * amp * dip))
        _set(local, names, "spine", rot_x(0.35 * amp * dip))
        _set(local, names, "l_shoulder", rot_x(-0.8 * amp * dip))
        _set(local, names, "r_shoulder", rot_x(-0.8 * amp * dip))
        root_pos[:, 1] = base_y - 0.35 * amp * leg_length(skel) * dip
    elif mp.family == "turn":
        yaw = amp * 0.8 * t * 2.0 * math.pi * mp.frequency / 4.0
        root_rot = rot_y(yaw)
        _set(local, names, "l_shoulder", rot_x(-0.15 * amp * np.sin(ph)))
        _set(local, names, "r_shoulder", rot_x(0.15 * amp * np.sin(ph)))
        root_pos[:, 1] = base_y

    local[:, 0] = root_rot
    return MotionClip(fps=fps, root_pos=root_pos, root_rot=root_rot, local_rot=local)


# -- prompts -----------------------------------------------------------------------

@dataclass(frozen=True)
class PromptTokens:
    """Fixed-length token id sequence over the closed vocabulary."""

    ids: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if any(i < 0 or i >= len(VOCAB) for i in self.ids):
            raise KinematicsError("prompt id out of vocabulary")

    @property
    def length(self) -> int:
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    def words(self) -> List[str]:
        return [VOCAB[i] for i in self.ids if i != PAD_ID]


def padding_prompt(length: int = 16) -> PromptTokens:
    return PromptTokens((PAD_ID,) * length)


def _speed_word(speed: float) -> str:
    if speed < 0.9:
        return "slow"
    if speed < 1.1:
        return "steady"
    return "fast"


def _amp_word(amplitude: float) -> str:
    if amplitude < 0.85:
        return "subtle"
    if amplitude < 1.05:
        return "medium"
    return "wide"


def synth_prompt(mp: MotionParams, variant: int = 0, length: int = 16) -> PromptTokens:
    """Template phrase over (family, amplitude word, speed word); the variant
    picks the template, so different variants reorder the same content."""
    fam, ampw, spw = mp.family, _amp_word(mp.amplitude), _speed_word(mp.speed)
    templates = [
        [fam, ampw, spw],
        ["a", "person", "performs", fam, ampw, spw],
        [spw, ampw, fam, "motion"],
    ]
    words = templates[variant % len(templates)]
    if len(words) > length:
        raise KinematicsError("prompt template longer than prompt length")
    ids = [_WORD[w] for w in words]
    return PromptTokens(tuple(ids) + (PAD_ID,) * (length - len(ids)))


def parse_prompt(text: str, length: int = 16) -> PromptTokens:
    """Free text -> token ids; unknown words are rejected (closed vocabulary)."""
    words = text.split()
    unknown = [w for w in words if w not in _WORD]
    if unknown:
        raise KinematicsError(f"words outside the vocabulary: {unknown}")
    if len(words) > length:
        raise KinematicsError("prompt longer than prompt length")
    ids = tuple(_WORD[w] for w in words)
    return PromptTokens(ids + (PAD_ID,) * (length - len(ids)))


# -- dataset ------------------------------------------------------------------------

@dataclass
class DataConfig:
    """Synthetic dataset controls."""

    n_clips: int = 32
    window: int = 64
    fps: float = 30.0
    seed: int = 0
    joints: int = 16
    families: Tuple[str, ...] = FAMILIES
    scale_choices: Optional[Tuple[float, ...]] = None   # discrete arm/leg scales
    scale_range: Tuple[float, float] = (0.8, 1.2)
    speed_range: Tuple[float, float] = (0.7, 1.3)
    freq_range: Tuple[float, float] = (0.7, 1.3)
    amp_range: Tuple[float, float] = (0.7, 1.2)
    prompt_len: int = 16


@dataclass
class DatasetItem:
    features: np.ndarray              # (window, D), raw feature space
    tokens: PromptTokens
    skel_cond: SkeletonCondition
    skel: Skeleton
    motion: MotionParams
    skel_params: SkeletonParams
    window_start: int
    fps: float


@dataclass
class DatasetBundle:
    items: List[DatasetItem]
    train_indices: List[int]
    test_indices: List[int]
    layout: FeatureLayout
    config: DataConfig

    def train_items(self) -> List[DatasetItem]:
        return [self.items[i] for i in self.train_indices]

    def test_items(self) -> List[DatasetItem]:
        return [self.items[i] for i in self.test_indices]

    def manifest(self) -> Dict:
        cfg = self.config
        return {
            "seed": cfg.seed,
            "n_clips": cfg.n_clips,
            "window": cfg.window,
            "fps": cfg.fps,
            "joints": cfg.joints,
            "families": list(cfg.families),
            "scale_choices": list(cfg.scale_choices) if cfg.scale_choices else None,
            "scale_range": list(cfg.scale_range),
            "speed_range": list(cfg.speed_range),
            "freq_range": list(cfg.freq_range),
            "amp_range": list(cfg.amp_range),
            "prompt_len": cfg.prompt_len,
            "feature_dim": self.layout.total_dim,
            "train_indices": list(map(int, self.train_indices)),
            "test_indices": list(map(int, self.test_indices)),
            "clips": [
                {
                    "family": it.motion.family,
                    "prompt": " ".join(it.tokens.words()),
                    "speed": it.motion.speed,
                    "frequency": it.motion.frequency,
                    "amplitude": it.motion.amplitude,
                    "arms": it.skel_params.arms,
                    "legs": it.skel_params.legs,
                    "window_start": it.window_start,
                }
                for it in self.items
            ],
        }


def _draw_scale(rng: np.random.Generator, cfg: DataConfig) -> float:
    if cfg.scale_choices:
        return float(rng.choice(np.asarray(cfg.scale_choices)))
    lo, hi = cfg.scale_range
    return float(rng.uniform(lo, hi))


def build_dataset(cfg: DataConfig) -> DatasetBundle:
    """Sample clips, encode, and slice fixed windows. Deterministic in the
    seed: each clip gets its own spawned RNG, so per-clip draws are stable
    regardless of evaluation order."""
    layout = FeatureLayout(cfg.joints)
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_clips + 1)
    items: List[DatasetItem] = []
    for i in range(cfg.n_clips):
        rng = np.random.default_rng(seqs[i])
        sp = SkeletonParams(arms=_draw_scale(rng, cfg), legs=_draw_scale(rng, cfg))
        mp = MotionParams(
            family=cfg.families[int(rng.integers(0, len(cfg.families)))],
            speed=float(rng.uniform(*cfg.speed_range)),
            frequency=float(rng.uniform(*cfg.freq_range)),
            amplitude=float(rng.uniform(*cfg.amp_range)),
            phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            duration=float(rng.uniform(2.5, 5.0)),
        )
        skel = make_skeleton(sp, cfg.joints)
        clip = synth_motion(skel, mp, cfg.fps)
        if clip.frames < cfg.window:
            mp = MotionParams(**{**mp.__dict__, "duration": cfg.window / cfg.fps + 1.0})
            clip = synth_motion(skel, mp, cfg.fps)
        feat = encode(clip, skel, layout)
        start = int(rng.integers(0, clip.frames - cfg.window + 1))
        items.append(DatasetItem(
            features=feat[start:start + cfg.window].copy(),
            tokens=synth_prompt(mp, variant=int(rng.integers(0, 3)), length=cfg.prompt_len),
            skel_cond=build_skeleton_condition(skel, layout),
            skel=skel,
            motion=mp,
            skel_params=sp,
            window_start=start,
            fps=cfg.fps,
        ))
    split_rng = np.random.default_rng(seqs[-1])
    order = split_rng.permutation(cfg.n_clips)
    n_train = math.ceil(0.8 * cfg.n_clips)
    train = sorted(int(k) for k in order[:n_train])
    test = sorted(int(k) for k in order[n_train:])
    return DatasetBundle(items=items, train_indices=train, test_indices=test,
                         layout=layout, config=cfg)


def ground_truth_clip(item: DatasetItem, target_skel: Skeleton) -> MotionClip:
    """The item's motion re-rendered on another skeleton and sliced to the
    item's window: the retargeting ground truth."""
    clip = synth_motion(target_skel, item.motion, item.fps)
    return clip.window(item.window_start, item.features.shape[0])


def ground_truth_positions(item: DatasetItem, target_skel: Skeleton) -> np.ndarray:
    """FK positions of ground_truth_clip."""
    return forward_kinematics(target_skel, ground_truth_clip(item, target_skel))
