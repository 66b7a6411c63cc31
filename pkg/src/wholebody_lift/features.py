"""Model input assembly: normalized 2D keypoints plus per-joint parent distance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from wholebody_lift.skeleton import SkeletonTopology, flip_permutation

DEFAULT_IMAGE_SIZE = (1000, 1000)


class FeatureError(ValueError):
    pass


@dataclass
class PoseSample:
    """One 2D/3D pair. ``joints_3d_gt`` is None for pure inference."""

    joints_2d: np.ndarray
    joints_3d_gt: Optional[np.ndarray] = None
    sample_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        self.joints_2d = np.asarray(self.joints_2d, dtype=np.float64)
        if self.joints_2d.ndim != 2 or self.joints_2d.shape[1] != 2:
            raise FeatureError(f"sample {self.sample_id!r}: joints_2d has shape {self.joints_2d.shape}")
        if not np.all(np.isfinite(self.joints_2d)):
            raise FeatureError(f"sample {self.sample_id!r}: joints_2d contains NaN/Inf")
        if self.joints_3d_gt is not None:
            self.joints_3d_gt = np.asarray(self.joints_3d_gt, dtype=np.float64)
            if self.joints_3d_gt.shape != (self.joints_2d.shape[0], 3):
                raise FeatureError(
                    f"sample {self.sample_id!r}: joints_3d has shape {self.joints_3d_gt.shape}"
                )
            if not np.all(np.isfinite(self.joints_3d_gt)):
                raise FeatureError(f"sample {self.sample_id!r}: joints_3d contains NaN/Inf")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FeatureError(f"{what} contains NaN or Inf")


def compute_distances(joints_2d: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Euclidean distance from every joint to its parent. Works on (..., J, 2).

    The root is its own parent, so its distance is exactly zero.
    """
    joints_2d = np.asarray(joints_2d, dtype=np.float64)
    _check_finite(joints_2d, "joints_2d")
    diff = joints_2d - joints_2d[..., topo.parent_array, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def normalize_2d(joints_2d: np.ndarray, image_size: Sequence[float] = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Map pixel coordinates to [-1, 1] about the image center (aspect preserved)."""
    w, h = float(image_size[0]), float(image_size[1])
    center = np.array([w / 2.0, h / 2.0])
    return (np.asarray(joints_2d, dtype=np.float64) - center) / (max(w, h) / 2.0)


def denormalize_2d(xy: np.ndarray, image_size: Sequence[float] = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    w, h = float(image_size[0]), float(image_size[1])
    return np.asarray(xy, dtype=np.float64) * (max(w, h) / 2.0) + np.array([w / 2.0, h / 2.0])


def features_from_normalized(xy: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Stack (x, y, d) for already-normalized coordinates. Shape (..., J, 3)."""
    xy = np.asarray(xy, dtype=np.float64)
    d = compute_distances(xy, topo)
    return np.concatenate([xy, d[..., None]], axis=-1)


def assemble_input(
    joints_2d: np.ndarray,
    topo: SkeletonTopology,
    image_size: Sequence[float] = DEFAULT_IMAGE_SIZE,
) -> np.ndarray:
    """Pixel keypoints (..., J, 2) -> model input (..., J, 3) with columns x, y, d.

    Distances are taken after normalization so all three channels share a scale.
    """
    joints_2d = np.asarray(joints_2d, dtype=np.float64)
    _check_finite(joints_2d, "joints_2d")
    if joints_2d.shape[-2:] != (topo.num_joints, 2):
        raise FeatureError(f"expected (..., {topo.num_joints}, 2) keypoints, got {joints_2d.shape}")
    return features_from_normalized(normalize_2d(joints_2d, image_size), topo)


def _flip(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    out = np.array(pose, dtype=np.float64, copy=True)
    out[..., 0] *= -1.0
    return out[..., flip_permutation(topo), :]


def flip_2d(joints_2d: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Mirror normalized 2D keypoints: negate x, then swap left/right joints."""
    return _flip(joints_2d, topo)


def flip_3d(joints_3d: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Mirror a 3D pose about the x = 0 plane and swap left/right joints."""
    return _flip(joints_3d, topo)


def pelvis_center(joints_3d: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Subtract the mid-hip point. Training targets live in this frame."""
    joints_3d = np.asarray(joints_3d, dtype=np.float64)
    pelvis = 0.5 * (joints_3d[..., topo.left_hip, :] + joints_3d[..., topo.right_hip, :])
    return joints_3d - pelvis[..., None, :]
