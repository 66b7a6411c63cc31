"""Whole-body MPJPE protocol with pelvis, nose and per-hand wrist alignment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from wholebody_lift.skeleton import SkeletonTopology

ALIGNMENTS = ("pelvis", "nose", "wrist", "none")


@dataclass
class MetricReport:
    """Six MPJPE values in millimetres."""

    mpjpe_all: float
    mpjpe_body: float
    mpjpe_face: float
    mpjpe_face_aligned: float
    mpjpe_hands: float
    mpjpe_hands_aligned: float

    def to_dict(self) -> dict:
        return {**asdict(self), "units": "mm"}

    def to_json(self, method: str | None = None) -> str:
        d = self.to_dict()
        if method is not None:
            d["method"] = method
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table_row(self, method: str) -> str:
        return (
            f"{method:<40s} {self.mpjpe_all:8.2f} {self.mpjpe_body:8.2f} "
            f"{self.mpjpe_face:8.2f}/{self.mpjpe_face_aligned:<6.2f} "
            f"{self.mpjpe_hands:8.2f}/{self.mpjpe_hands_aligned:<6.2f}"
        )

    def to_table(self, method: str = "Proposed") -> str:
        return format_table([(method, self)])


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    header = f"{'Method':<40s} {'All':>8s} {'Body':>8s} {'Face/Aligned':>15s} {'Hand/Aligned':>15s}"
    lines = [header, "-" * len(header)]
    lines += [r.table_row(name) for name, r in rows]
    lines.append("MPJPE in mm.")
    return "\n".join(lines) + "\n"


def align_pelvis(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    pelvis = 0.5 * (pose[..., topo.left_hip, :] + pose[..., topo.right_hip, :])
    return pose - pelvis[..., None, :]


def align_nose(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Centre on the face block's nose-tip landmark."""
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., topo.face_nose_kp, None, :]


def align_wrists(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Centre each hand block on its own hand root. Non-hand joints become NaN."""
    pose = np.asarray(pose, dtype=np.float64)
    out = np.full_like(pose, np.nan)
    for lo, hi in topo.hand_blocks:
        out[..., lo:hi, :] = pose[..., lo:hi, :] - pose[..., lo, None, :]
    return out


def _align(pose: np.ndarray, topo: SkeletonTopology, alignment: str) -> np.ndarray:
    if alignment == "pelvis":
        return align_pelvis(pose, topo)
    if alignment == "nose":
        return align_nose(pose, topo)
    if alignment == "wrist":
        return align_wrists(pose, topo)
    if alignment == "none":
        return np.asarray(pose, dtype=np.float64)
    raise ValueError(f"unknown alignment {alignment!r}; expected one of {ALIGNMENTS}")


def mpjpe(
    pred: np.ndarray,
    gt: np.ndarray,
    joints,
    alignment: str,
    topo: SkeletonTopology,
) -> float:
    """Mean Euclidean joint error over samples and ``joints`` after ``alignment``.

    ``pred`` and ``gt`` are (N, J, 3) or (J, 3).
    """
    joints = np.asarray(joints, dtype=np.int64).reshape(-1)
    if joints.size == 0:
        raise ValueError("empty joint subset")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if alignment == "wrist":
        lo, hi = topo.part_ranges["hands"]
        if joints.min() < lo or joints.max() >= hi:
            raise ValueError("wrist alignment is only defined for hand joints")
    p = _align(pred, topo, alignment)[..., joints, :]
    g = _align(gt, topo, alignment)[..., joints, :]
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def evaluate(pred: np.ndarray, gt: np.ndarray, topo: SkeletonTopology) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape[0] != gt.shape[0]:
        raise ValueError(f"sample count mismatch: {pred.shape[0]} predictions vs {gt.shape[0]} targets")
    body, face, hands = (topo.part_indices(k) for k in ("body", "face", "hands"))
    everything = np.arange(topo.num_joints)
    return MetricReport(
        mpjpe_all=mpjpe(pred, gt, everything, "pelvis", topo),
        mpjpe_body=mpjpe(pred, gt, body, "pelvis", topo),
        mpjpe_face=mpjpe(pred, gt, face, "pelvis", topo),
        mpjpe_face_aligned=mpjpe(pred, gt, face, "nose", topo),
        mpjpe_hands=mpjpe(pred, gt, hands, "pelvis", topo),
        mpjpe_hands_aligned=mpjpe(pred, gt, hands, "wrist", topo),
    )
