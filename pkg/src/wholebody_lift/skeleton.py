"""133-joint whole-body topology (COCO-WholeBody layout).

Joint layout, 0-based:
    0-16    COCO body keypoints (0=nose, 9/10=wrists, 11/12=hips)
    17-22   feet
    23-90   68 face landmarks
            (53 = nose tip landmark, the face-alignment centre)
    91-111  left hand (91 = hand root, keypoint 92 when counted from 1)
    112-132 right hand (112 = hand root, keypoint 113 when counted from 1)

The kinematic tree is rooted at the nose, whose parent is itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

NUM_JOINTS = 133
PART_SIZES = {"body": 23, "face": 68, "hands": 42}
TRIANGLE_ORDER = ("L_arm", "R_arm", "L_leg", "R_leg")
DEFAULT_ASSET = "topology_v1.json"


class TopologyError(ValueError):
    """Base class for topology validation failures."""


class MissingFieldError(TopologyError):
    pass


class ParentCycleError(TopologyError):
    pass


class PartRangeError(TopologyError):
    pass


class FlipPairError(TopologyError):
    pass


class LimbTriangleError(TopologyError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    num_joints: int
    parent: tuple[int, ...]
    part_ranges: dict[str, tuple[int, int]]
    flip_pairs: tuple[tuple[int, int], ...]
    limb_triangles: tuple[tuple[int, int, int], ...]
    left_hip: int
    right_hip: int
    nose: int
    left_wrist_kp: int
    right_wrist_kp: int
    # nose tip inside the face block (68-point landmark 30); centre for face-aligned MPJPE
    face_nose_kp: int = 53
    version: str = "unversioned"
    joint_names: tuple[str, ...] = field(default=(), compare=False)

    @property
    def root(self) -> int:
        return next(i for i, p in enumerate(self.parent) if p == i)

    @property
    def parent_array(self) -> np.ndarray:
        return np.asarray(self.parent, dtype=np.int64)

    def part_slice(self, name: str) -> slice:
        lo, hi = self.part_ranges[name]
        return slice(lo, hi)

    def part_indices(self, name: str) -> np.ndarray:
        lo, hi = self.part_ranges[name]
        return np.arange(lo, hi)

    @property
    def hand_blocks(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Left and right hand index ranges, each starting at its hand root."""
        lo, hi = self.part_ranges["hands"]
        mid = lo + (hi - lo) // 2
        return (lo, mid), (mid, hi)

    def depth(self, joint: int) -> int:
        d = 0
        while self.parent[joint] != joint:
            joint = self.parent[joint]
            d += 1
        return d

    def validate(self) -> None:
        _validate(self)


def _validate(topo: SkeletonTopology) -> None:
    n = topo.num_joints
    if n != NUM_JOINTS:
        raise TopologyError(f"num_joints must be {NUM_JOINTS}, got {n}")
    if len(topo.parent) != n:
        raise TopologyError(f"parent table has {len(topo.parent)} entries, expected {n}")
    for i, p in enumerate(topo.parent):
        if not 0 <= p < n:
            raise TopologyError(f"parent[{i}]={p} is out of range")

    roots = [i for i, p in enumerate(topo.parent) if p == i]
    if len(roots) != 1:
        raise ParentCycleError(f"expected exactly one root (parent[i]==i), found {roots}")
    for start in range(n):
        j, steps = start, 0
        while topo.parent[j] != j:
            j = topo.parent[j]
            steps += 1
            if steps >= n:
                raise ParentCycleError(
                    f"joint {start} never reaches the root: cycle in parent table "
                    f"(parent[{start}]={topo.parent[start]})"
                )

    expected = ("body", "face", "hands")
    if tuple(topo.part_ranges) != expected:
        raise PartRangeError(f"part_ranges must be ordered {expected}, got {tuple(topo.part_ranges)}")
    cursor = 0
    for name in expected:
        lo, hi = topo.part_ranges[name]
        if lo != cursor:
            raise PartRangeError(f"part '{name}' starts at {lo}, expected {cursor} (contiguous cover)")
        if hi - lo != PART_SIZES[name]:
            raise PartRangeError(f"part '{name}' has size {hi - lo}, expected {PART_SIZES[name]}")
        cursor = hi
    if cursor != n:
        raise PartRangeError(f"part ranges end at {cursor}, expected {n}")

    seen: dict[int, tuple[int, int]] = {}
    for pair in topo.flip_pairs:
        a, b = pair
        if a == b:
            raise FlipPairError(f"flip pair {pair} maps a joint onto itself")
        for idx in (a, b):
            if not 0 <= idx < n:
                raise FlipPairError(f"flip pair {pair} has out-of-range index {idx}")
            if idx in seen:
                raise FlipPairError(
                    f"joint {idx} appears in flip pairs {seen[idx]} and {pair}; not an involution"
                )
            seen[idx] = pair

    if len(topo.limb_triangles) != 4:
        raise LimbTriangleError(f"expected 4 limb triangles, got {len(topo.limb_triangles)}")
    body_lo, body_hi = topo.part_ranges["body"]
    for name, tri in zip(TRIANGLE_ORDER, topo.limb_triangles):
        if len(set(tri)) != 3:
            raise LimbTriangleError(f"limb triangle {name}={tri} has repeated indices")
        if not all(body_lo <= t < body_hi for t in tri):
            raise LimbTriangleError(f"limb triangle {name}={tri} leaves the body range")

    for name in ("left_hip", "right_hip", "nose"):
        idx = getattr(topo, name)
        if not body_lo <= idx < body_hi:
            raise TopologyError(f"{name}={idx} is not a body joint")
    face_lo, face_hi = topo.part_ranges["face"]
    if not face_lo <= topo.face_nose_kp < face_hi:
        raise TopologyError(f"face_nose_kp={topo.face_nose_kp} is not a face joint")
    (l_lo, _), (r_lo, _) = topo.hand_blocks
    if topo.left_wrist_kp != l_lo or topo.right_wrist_kp != r_lo:
        raise TopologyError(
            f"hand keypoints ({topo.left_wrist_kp}, {topo.right_wrist_kp}) must be the "
            f"first joint of each hand block ({l_lo}, {r_lo})"
        )
    for hand_root in (topo.left_wrist_kp, topo.right_wrist_kp):
        p = topo.parent[hand_root]
        if not body_lo <= p < body_hi:
            raise TopologyError(f"hand root {hand_root} must hang off a body wrist, parent is {p}")
    flip = dict(_both_directions(topo.flip_pairs))
    lw, rw = topo.parent[topo.left_wrist_kp], topo.parent[topo.right_wrist_kp]
    if flip.get(lw) != rw:
        raise TopologyError(f"hand-root parents {lw} and {rw} are not a flip pair")


def _both_directions(pairs):
    for a, b in pairs:
        yield a, b
        yield b, a


def _require(doc: dict, key: str):
    if key not in doc:
        raise MissingFieldError(f"topology document is missing field '{key}'")
    return doc[key]


def topology_from_dict(doc: dict) -> SkeletonTopology:
    tris = _require(doc, "limb_triangles")
    if isinstance(tris, dict):
        missing = [k for k in TRIANGLE_ORDER if k not in tris]
        if missing:
            raise LimbTriangleError(f"limb_triangles is missing {missing}")
        tris = [tris[k] for k in TRIANGLE_ORDER]
    ranges = _require(doc, "part_ranges")
    topo = SkeletonTopology(
        num_joints=int(_require(doc, "num_joints")),
        parent=tuple(int(p) for p in _require(doc, "parent")),
        part_ranges={k: (int(v[0]), int(v[1])) for k, v in ranges.items()},
        flip_pairs=tuple((int(a), int(b)) for a, b in _require(doc, "flip_pairs")),
        limb_triangles=tuple(tuple(int(t) for t in tri) for tri in tris),
        left_hip=int(_require(doc, "left_hip")),
        right_hip=int(_require(doc, "right_hip")),
        nose=int(_require(doc, "nose")),
        left_wrist_kp=int(_require(doc, "left_wrist_kp")),
        right_wrist_kp=int(_require(doc, "right_wrist_kp")),
        face_nose_kp=int(_require(doc, "face_nose_kp")),
        version=str(doc.get("version", "unversioned")),
        joint_names=tuple(doc.get("joint_names", ())),
    )
    topo.validate()
    return topo


def load_topology(source: str | Path | dict | None = None) -> SkeletonTopology:
    """Load and validate a topology document.

    ``source`` may be a path to a JSON document, JSON text, an already-parsed
    dict, or None for the shipped default asset.
    """
    if source is None:
        text = resources.files("wholebody_lift.assets").joinpath(DEFAULT_ASSET).read_text()
        doc = json.loads(text)
    elif isinstance(source, dict):
        doc = source
    elif isinstance(source, Path) or not str(source).lstrip().startswith("{"):
        doc = json.loads(Path(source).read_text())
    else:
        doc = json.loads(source)
    return topology_from_dict(doc)


def topology_to_dict(topo: SkeletonTopology) -> dict:
    return {
        "version": topo.version,
        "num_joints": topo.num_joints,
        "joint_names": list(topo.joint_names),
        "parent": list(topo.parent),
        "part_ranges": {k: list(v) for k, v in topo.part_ranges.items()},
        "flip_pairs": [list(p) for p in topo.flip_pairs],
        "limb_triangles": {k: list(t) for k, t in zip(TRIANGLE_ORDER, topo.limb_triangles)},
        "left_hip": topo.left_hip,
        "right_hip": topo.right_hip,
        "nose": topo.nose,
        "left_wrist_kp": topo.left_wrist_kp,
        "right_wrist_kp": topo.right_wrist_kp,
        "face_nose_kp": topo.face_nose_kp,
    }


def build_adjacency(topo: SkeletonTopology) -> np.ndarray:
    """Boolean (J, J) mask: self-loops plus parent/child links in both directions."""
    n = topo.num_joints
    mask = np.eye(n, dtype=bool)
    child = np.arange(n)
    par = topo.parent_array
    mask[child, par] = True
    mask[par, child] = True
    return mask


def flip_permutation(topo: SkeletonTopology) -> np.ndarray:
    """Index permutation swapping left/right joints; midline joints map to themselves."""
    perm = np.arange(topo.num_joints)
    for a, b in topo.flip_pairs:
        perm[a], perm[b] = b, a
    return perm


_DEFAULT: SkeletonTopology | None = None


def default_topology() -> SkeletonTopology:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_topology()
    return _DEFAULT
