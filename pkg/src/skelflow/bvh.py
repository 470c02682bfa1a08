"""BVH text format: parsing, writing, and canonical-form conversion.

Conventions pinned here (the format in the wild is loose):

- Local translation = OFFSET + position channels. Position channels animate
  on top of the rest offset (Blender's importer convention), so a static
  root writes all-zero translation channels.
- Rotation channels are intrinsic rotations applied in channel order; with
  column vectors the first channel is the outermost factor, so a
  "Zrotation Xrotation Yrotation" joint builds Rz @ Rx @ Ry. Any channel
  count and order is accepted on input; export is always ZYX.
- Angles are degrees in the file, matrices inside.
- Positions are converted to meters: if the median non-root bone length
  exceeds 10 the file is assumed to be centimeters and scaled by 0.01
  (override with unit_scale).

The parser never raises anything but BvhParseError, and every diagnostic
carries a line number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .kinematics import (
    KinematicsError, MotionClip, Skeleton, Topology, rot_x, rot_y, rot_z,
)

__all__ = [
    "BvhError", "BvhParseError", "JointChannels", "BvhDocument",
    "parse_bvh", "write_bvh", "write_position_bvh", "standardize",
]

_POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
_ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")
_ROT_FN = {"X": rot_x, "Y": rot_y, "Z": rot_z}

_UNIT_HEURISTIC_CUTOFF = 10.0  # median bone length above this reads as cm
_CM_TO_M = 0.01


class BvhError(ValueError):
    """Any failure in this module that is not a located parse diagnostic."""


class BvhParseError(BvhError):
    """Parse failure with the 1-based source line it was detected on."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class JointChannels:
    """Declared channel list of one joint, in file order."""

    name: str
    channels: Tuple[str, ...]

    @property
    def rotation_order(self) -> str:
        return "".join(c[0] for c in self.channels if c in _ROTATION_CHANNELS)


@dataclass
class BvhDocument:
    """A parsed file: rest skeleton, per-joint channel layout, raw channel
    rows (unit-scaled, angles still in degrees), and the derived clip.

    The clip keeps translation only for the root; translation channels on
    other joints stay available in `frames` and are honored by the FK used
    in standardize().
    """

    skeleton: Skeleton
    channel_spec: List[JointChannels]
    frames: np.ndarray          # (T, total channels)
    frame_time: float
    clip: MotionClip
    end_sites: Dict[str, np.ndarray]

    @property
    def fps(self) -> float:
        return 1.0 / self.frame_time


# -- tokenizer ---------------------------------------------------------------------

class _Tokens:
    """Whitespace tokens tagged with 1-based line numbers."""

    def __init__(self, text: str):
        self.items: List[Tuple[int, str]] = []
        for ln, line in enumerate(text.splitlines(), start=1):
            for tok in line.split():
                self.items.append((ln, tok))
        self.pos = 0
        self.last_line = 1

    def eof(self) -> bool:
        return self.pos >= len(self.items)

    def peek(self) -> Optional[str]:
        return None if self.eof() else self.items[self.pos][1]

    def next(self, what: str) -> str:
        if self.eof():
            raise BvhParseError(f"unexpected end of file, expected {what}", self.last_line)
        ln, tok = self.items[self.pos]
        self.pos += 1
        self.last_line = ln
        return tok

    def expect(self, literal: str) -> None:
        tok = self.next(repr(literal))
        if tok.upper() != literal.upper():
            raise BvhParseError(f"expected {literal!r}, found {tok!r}", self.last_line)

    def number(self, what: str) -> float:
        tok = self.next(what)
        try:
            value = float(tok)
        except ValueError:
            raise BvhParseError(f"expected {what}, found non-numeric {tok!r}", self.last_line)
        if not math.isfinite(value):
            raise BvhParseError(f"non-finite {what}: {tok!r}", self.last_line)
        return value

    def integer(self, what: str) -> int:
        value = self.number(what)
        if value != int(value):
            raise BvhParseError(f"expected integer {what}, found {value}", self.last_line)
        return int(value)

    def remaining_rows(self) -> List[Tuple[int, List[str]]]:
        """Group the leftover tokens by source line."""
        rows: List[Tuple[int, List[str]]] = []
        for ln, tok in self.items[self.pos:]:
            if rows and rows[-1][0] == ln:
                rows[-1][1].append(tok)
            else:
                rows.append((ln, [tok]))
        self.pos = len(self.items)
        return rows


# -- parser ------------------------------------------------------------------------

@dataclass
class _Node:
    name: str
    parent: int
    offset: np.ndarray
    channels: Tuple[str, ...]


def _parse_offset(ts: _Tokens) -> np.ndarray:
    ts.expect("OFFSET")
    return np.array([ts.number("offset component") for _ in range(3)])


def _parse_joint(ts: _Tokens, nodes: List[_Node], end_sites: Dict[str, np.ndarray],
                 parent: int) -> None:
    name = ts.next("joint name")
    if name in ("{", "}"):
        raise BvhParseError("missing joint name", ts.last_line)
    if any(n.name == name for n in nodes):
        raise BvhParseError(f"duplicate joint name {name!r}", ts.last_line)
    ts.expect("{")
    index = len(nodes)
    nodes.append(_Node(name=name, parent=parent, offset=np.zeros(3), channels=()))
    saw_offset = False
    while True:
        tok = ts.next("'}' or joint element")
        up = tok.upper()
        if up == "}":
            break
        if up == "OFFSET":
            nodes[index].offset = np.array([ts.number("offset component") for _ in range(3)])
            saw_offset = True
        elif up == "CHANNELS":
            n = ts.integer("channel count")
            if n < 0 or n > 12:
                raise BvhParseError(f"implausible channel count {n}", ts.last_line)
            chans = []
            for _ in range(n):
                c = ts.next("channel name")
                matched = next((k for k in _POSITION_CHANNELS + _ROTATION_CHANNELS
                                if k.upper() == c.upper()), None)
                if matched is None:
                    raise BvhParseError(f"unknown channel name {c!r}", ts.last_line)
                chans.append(matched)
            nodes[index].channels = tuple(chans)
        elif up == "JOINT":
            _parse_joint(ts, nodes, end_sites, index)
        elif up == "END":
            site = ts.next("'Site'")
            if site.upper() != "SITE":
                raise BvhParseError(f"expected 'Site' after 'End', found {site!r}", ts.last_line)
            ts.expect("{")
            end_sites[name] = _parse_offset(ts)
            ts.expect("}")
        else:
            raise BvhParseError(f"unexpected token {tok!r} inside joint", ts.last_line)
    if not saw_offset:
        raise BvhParseError(f"joint {name!r} has no OFFSET", ts.last_line)


def _compose_rotations(spec: JointChannels, frames: np.ndarray, cols: Dict[str, int]) -> np.ndarray:
    """Per-frame rotation matrix of one joint from its rotation channels."""
    T = frames.shape[0]
    R = np.broadcast_to(np.eye(3), (T, 3, 3)).copy()
    for c in spec.channels:
        if c in _ROTATION_CHANNELS:
            angles = np.radians(frames[:, cols[f"{spec.name}/{c}"]])
            R = R @ _ROT_FN[c[0]](angles)
    return R


def _column_index(channel_spec: Sequence[JointChannels]) -> Dict[str, int]:
    cols: Dict[str, int] = {}
    k = 0
    for spec in channel_spec:
        for c in spec.channels:
            cols[f"{spec.name}/{c}"] = k
            k += 1
    return cols


def _joint_translations(doc_skel: Skeleton, channel_spec: Sequence[JointChannels],
                        frames: np.ndarray) -> np.ndarray:
    """(T, J, 3) local translations: offset plus any position channels."""
    cols = _column_index(channel_spec)
    T = frames.shape[0]
    trans = np.broadcast_to(doc_skel.offsets, (T,) + doc_skel.offsets.shape).copy()
    for j, spec in enumerate(channel_spec):
        for axis, c in enumerate(_POSITION_CHANNELS):
            key = f"{spec.name}/{c}"
            if key in cols:
                trans[:, j, axis] += frames[:, cols[key]]
    return trans


def parse_bvh(text: str, unit_scale: Optional[float] = None) -> BvhDocument:
    """Parse a BVH document. unit_scale=None applies the cm heuristic;
    pass 1.0 to keep file units, or any explicit factor."""
    ts = _Tokens(text)
    ts.expect("HIERARCHY")
    tok = ts.next("'ROOT'")
    if tok.upper() != "ROOT":
        raise BvhParseError(f"expected 'ROOT', found {tok!r}", ts.last_line)
    nodes: List[_Node] = []
    end_sites: Dict[str, np.ndarray] = {}
    _parse_joint(ts, nodes, end_sites, parent=-1)

    tok = ts.next("'MOTION'")
    if tok.upper() != "MOTION":
        raise BvhParseError(f"expected 'MOTION' after hierarchy, found {tok!r}", ts.last_line)
    tok = ts.next("'Frames:'")
    if tok.upper() not in ("FRAMES:", "FRAMES"):
        raise BvhParseError(f"expected 'Frames:', found {tok!r}", ts.last_line)
    if tok.upper() == "FRAMES":
        ts.expect(":")
    claimed = ts.integer("frame count")
    motion_line = ts.last_line
    tok = ts.next("'Frame'")
    if tok.upper() != "FRAME":
        raise BvhParseError(f"expected 'Frame Time:', found {tok!r}", ts.last_line)
    tok = ts.next("'Time:'")
    if tok.upper() not in ("TIME:", "TIME"):
        raise BvhParseError(f"expected 'Time:' after 'Frame', found {tok!r}", ts.last_line)
    if tok.upper() == "TIME":
        ts.expect(":")
    frame_time = ts.number("frame time")
    if frame_time <= 0:
        raise BvhParseError(f"frame time must be positive, got {frame_time}", ts.last_line)

    channel_spec = [JointChannels(n.name, n.channels) for n in nodes]
    width = sum(len(s.channels) for s in channel_spec)
    rows = ts.remaining_rows()
    if claimed != len(rows):
        raise BvhParseError(
            f"MOTION declares {claimed} frames but contains {len(rows)} rows", motion_line)
    if claimed < 1:
        raise BvhParseError("MOTION must contain at least one frame", motion_line)
    frames = np.empty((len(rows), width))
    for r, (ln, toks) in enumerate(rows):
        if len(toks) != width:
            raise BvhParseError(
                f"frame row has {len(toks)} values, hierarchy declares {width} channels", ln)
        try:
            values = [float(t) for t in toks]
        except ValueError:
            raise BvhParseError("non-numeric value in frame row", ln)
        if not all(math.isfinite(v) for v in values):
            raise BvhParseError("non-finite value in frame row", ln)
        frames[r] = values

    offsets = np.stack([n.offset for n in nodes])
    scale = _resolve_unit_scale(unit_scale, nodes, end_sites)
    offsets = offsets * scale
    end_sites = {k: v * scale for k, v in end_sites.items()}
    cols = _column_index(channel_spec)
    for key, k in cols.items():
        if key.rsplit("/", 1)[1] in _POSITION_CHANNELS:
            frames[:, k] *= scale

    try:
        topology = Topology(names=[n.name for n in nodes],
                            parents=np.array([n.parent for n in nodes]))
        skeleton = Skeleton(topology, offsets)
    except KinematicsError as e:
        raise BvhParseError(f"invalid hierarchy: {e}", ts.last_line)

    clip = _document_clip(skeleton, channel_spec, frames, frame_time, cols)
    return BvhDocument(skeleton=skeleton, channel_spec=channel_spec, frames=frames,
                       frame_time=frame_time, clip=clip, end_sites=end_sites)


def _resolve_unit_scale(unit_scale: Optional[float], nodes: Sequence[_Node],
                        end_sites: Dict[str, np.ndarray]) -> float:
    if unit_scale is not None:
        return float(unit_scale)
    lengths = [float(np.linalg.norm(n.offset)) for n in nodes[1:]]
    lengths += [float(np.linalg.norm(v)) for v in end_sites.values()]
    if lengths and float(np.median(lengths)) > _UNIT_HEURISTIC_CUTOFF:
        return _CM_TO_M
    return 1.0


def _document_clip(skeleton: Skeleton, channel_spec: Sequence[JointChannels],
                   frames: np.ndarray, frame_time: float, cols: Dict[str, int]) -> MotionClip:
    T = frames.shape[0]
    J = skeleton.joints
    local = np.empty((T, J, 3, 3))
    for j, spec in enumerate(channel_spec):
        local[:, j] = _compose_rotations(spec, frames, cols)
    root_pos = np.broadcast_to(skeleton.offsets[0], (T, 3)).copy()
    for axis, c in enumerate(_POSITION_CHANNELS):
        key = f"{channel_spec[0].name}/{c}"
        if key in cols:
            root_pos[:, axis] += frames[:, cols[key]]
    return MotionClip(fps=1.0 / frame_time, root_pos=root_pos,
                      root_rot=local[:, 0], local_rot=local)


# -- writer ------------------------------------------------------------------------

def _fmt(values: Sequence[float]) -> str:
    return " ".join(f"{v:.6f}" for v in values)


def _write_hierarchy(lines: List[str], skel: Skeleton, channels: Sequence[Tuple[str, ...]]) -> None:
    topo = skel.topology
    children = [topo.children(j) for j in range(skel.joints)]

    def emit(j: int, depth: int) -> None:
        pad = "  " * depth
        kw = "ROOT" if j == 0 else "JOINT"
        lines.append(f"{pad}{kw} {topo.names[j]}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}  OFFSET {_fmt(skel.offsets[j])}")
        lines.append(f"{pad}  CHANNELS {len(channels[j])} {' '.join(channels[j])}")
        if children[j]:
            for c in children[j]:
                emit(c, depth + 1)
        else:
            lines.append(f"{pad}  End Site")
            lines.append(f"{pad}  {{")
            lines.append(f"{pad}    OFFSET 0.000000 0.000000 0.000000")
            lines.append(f"{pad}  }}")
        lines.append(f"{pad}}}")

    lines.append("HIERARCHY")
    emit(0, 0)


_ZYX = ("Zrotation", "Yrotation", "Xrotation")


def write_bvh(skel: Skeleton, clip: MotionClip) -> str:
    """Standard export: root carries translation + ZYX rotation channels,
    every other joint ZYX rotations only; leaf joints get zero-offset End
    Sites. Root translation channels hold root_pos minus the rest offset."""
    if clip.joints != skel.joints:
        raise BvhError("clip and skeleton joint counts differ")
    channels = [_POSITION_CHANNELS + _ZYX] + [_ZYX] * (skel.joints - 1)
    lines: List[str] = []
    _write_hierarchy(lines, skel, channels)
    lines.append("MOTION")
    lines.append(f"Frames: {clip.frames}")
    lines.append(f"Frame Time: {1.0 / clip.fps!r}")
    euler = np.stack(
        [Rotation.from_matrix(clip.local_rot[:, j]).as_euler("ZYX", degrees=True)
         for j in range(skel.joints)], axis=1)          # (T, J, 3)
    root_trans = clip.root_pos - skel.offsets[0]
    for t in range(clip.frames):
        row = np.concatenate([root_trans[t], euler[t].reshape(-1)])
        lines.append(_fmt(row))
    return "\n".join(lines) + "\n"


def write_position_bvh(topology: Topology, positions: np.ndarray, fps: float) -> str:
    """Position-only export for motion that exists as raw joint positions
    (no rotations): all offsets zero, every joint carries translation
    channels with parent-relative world deltas, rotations zero. Any
    offset-plus-channels FK reproduces the positions exactly."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[1] != len(topology.names) or positions.shape[2] != 3:
        raise BvhError("positions must be (frames, joints, 3) matching the topology")
    skel = Skeleton(topology, np.zeros((len(topology.names), 3)))
    channels = [_POSITION_CHANNELS + _ZYX] * skel.joints
    lines: List[str] = []
    _write_hierarchy(lines, skel, channels)
    lines.append("MOTION")
    lines.append(f"Frames: {positions.shape[0]}")
    lines.append(f"Frame Time: {1.0 / fps!r}")
    parents = topology.parents
    deltas = positions.copy()
    deltas[:, 1:] -= positions[:, parents[1:]]
    zeros = np.zeros(3)
    for t in range(positions.shape[0]):
        row = np.concatenate([np.concatenate([deltas[t, j], zeros])
                              for j in range(skel.joints)])
        lines.append(_fmt(row))
    return "\n".join(lines) + "\n"


# -- canonical-form conversion --------------------------------------------------------

def standardize(doc: BvhDocument, mapping: Dict[str, str]) -> Tuple[Skeleton, MotionClip]:
    """Convert a parsed document to a canonical skeleton.

    mapping is ordered: canonical name -> source joint name, listed in the
    canonical depth-first order (root first). Unmapped source joints are
    pruned; a retained joint is re-parented to its nearest mapped ancestor,
    its rest offset accumulates the pruned chain, and its rotation becomes
    the composition through the pruned joints (global orientations of
    retained joints are preserved exactly). The result is height-normalized
    to 1.0.
    """
    names = doc.skeleton.topology.names
    missing = sorted(set(mapping.values()) - set(names))
    if missing:
        raise BvhError(f"mapping references joints absent from the document: {missing}")

    canon = list(mapping.keys())
    src_of = {c: names.index(mapping[c]) for c in canon}
    src_set = set(src_of.values())
    src_parents = doc.skeleton.topology.parents

    parents: List[int] = []
    src_order = [src_of[c] for c in canon]
    for k, si in enumerate(src_order):
        p = src_parents[si]
        while p >= 0 and p not in src_set:
            p = src_parents[p]
        if p < 0:
            parents.append(-1)
        else:
            pk = src_order.index(p)
            if pk >= k:
                raise BvhError(
                    f"mapping order is not depth-first: {canon[k]!r} precedes its parent {canon[pk]!r}")
            parents.append(pk)
    if parents[0] != -1 or parents.count(-1) != 1:
        raise BvhError("mapping must start at the single root joint")

    rest = doc.skeleton.rest_positions()
    offsets = np.empty((len(canon), 3))
    offsets[0] = rest[src_order[0]]
    for k in range(1, len(canon)):
        offsets[k] = rest[src_order[k]] - rest[src_order[parents[k]]]

    G, P = _source_fk(doc)
    T = doc.frames.shape[0]
    local = np.empty((T, len(canon), 3, 3))
    local[:, 0] = G[:, src_order[0]]
    for k in range(1, len(canon)):
        gp = G[:, src_order[parents[k]]]
        local[:, k] = np.swapaxes(gp, -1, -2) @ G[:, src_order[k]]
    root_pos = P[:, src_order[0]].copy()

    skel = Skeleton(Topology(names=canon, parents=np.array(parents)), offsets)
    h = skel.height
    if h < 1e-6:
        raise BvhError("degenerate skeleton: height is zero")
    skel = Skeleton(skel.topology, offsets / h)
    clip = MotionClip(fps=doc.fps, root_pos=root_pos / h,
                      root_rot=local[:, 0], local_rot=local)
    return skel, clip


def _source_fk(doc: BvhDocument) -> Tuple[np.ndarray, np.ndarray]:
    """Global rotations and positions of every source joint, honoring
    per-joint translation channels (offset + channels)."""
    skel = doc.skeleton
    trans = _joint_translations(skel, doc.channel_spec, doc.frames)
    local = doc.clip.local_rot
    T = doc.frames.shape[0]
    J = skel.joints
    G = np.empty((T, J, 3, 3))
    P = np.empty((T, J, 3))
    G[:, 0] = local[:, 0]
    P[:, 0] = trans[:, 0]
    parents = skel.topology.parents
    for j in range(1, J):
        p = parents[j]
        G[:, j] = G[:, p] @ local[:, j]
        P[:, j] = P[:, p] + np.einsum("tab,tb->ta", G[:, p], trans[:, j])
    return G, P
