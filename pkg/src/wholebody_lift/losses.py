"""Training objective: 3D MSE, error-prediction MSE, limb normal L1, bone vector L1."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from wholebody_lift.skeleton import SkeletonTopology

# cross-product norms below this (mm^2) are treated as collinear
NORMAL_EPS = 1e-9


@dataclass
class LossWeights:
    alpha: float = 5e-1
    beta: float = 2.5e-1
    gamma: float = 2.5e-4
    delta: float = 5e-4

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v >= 0.0 and v < float("inf")):
                raise ValueError(f"loss weight {name}={v} must be finite and non-negative")


@dataclass
class LossReport:
    l3d: torch.Tensor
    lerror: torch.Tensor
    lnormal: torch.Tensor
    lbone: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l3d(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, gt)
    return torch.mean((pred - gt) ** 2)


def lerror(error_pred: torch.Tensor, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and true per-coordinate error |gt - pred|.

    The true error is detached: no gradient reaches ``pred`` through this term.
    """
    _same_shape(error_pred, pred)
    _same_shape(pred, gt)
    target = (gt - pred).abs().detach()
    return torch.mean((error_pred - target) ** 2)


def triangle_normal(p0: torch.Tensor, p1: torch.Tensor, p2: torch.Tensor, eps: float = NORMAL_EPS) -> torch.Tensor:
    """Unit normal of cross(p1 - p0, p2 - p1); zero vector for collinear points."""
    c = torch.linalg.cross(p1 - p0, p2 - p1, dim=-1)
    norm = torch.linalg.vector_norm(c, dim=-1, keepdim=True)
    degenerate = norm < eps
    unit = c / torch.where(degenerate, torch.ones_like(norm), norm)
    return torch.where(degenerate, torch.zeros_like(unit), unit)


def limb_normals(pose: torch.Tensor, topo: SkeletonTopology) -> torch.Tensor:
    """(B, 4, 3) unit normals of the limb triangles."""
    tri = torch.as_tensor(topo.limb_triangles, device=pose.device)
    return triangle_normal(pose[:, tri[:, 0]], pose[:, tri[:, 1]], pose[:, tri[:, 2]])


def lnormal(pred: torch.Tensor, gt: torch.Tensor, topo: SkeletonTopology) -> torch.Tensor:
    _same_shape(pred, gt)
    diff = limb_normals(gt, topo) - limb_normals(pred, topo)
    return diff.abs().sum(dim=-1).mean()


def bone_vectors(pose: torch.Tensor, topo: SkeletonTopology) -> torch.Tensor:
    """Vector from each joint to its parent; the root's bone is zero."""
    parent = torch.as_tensor(topo.parent, device=pose.device)
    return pose[..., parent, :] - pose


def lbone(pred: torch.Tensor, gt: torch.Tensor, topo: SkeletonTopology) -> torch.Tensor:
    _same_shape(pred, gt)
    diff = bone_vectors(gt, topo) - bone_vectors(pred, topo)
    return diff.abs().sum(dim=-1).mean()


def total_loss(
    pred: torch.Tensor,
    error_pred: torch.Tensor,
    gt: torch.Tensor,
    topo: SkeletonTopology,
    weights: LossWeights | None = None,
) -> LossReport:
    w = weights or LossWeights()
    terms = {
        "l3d": l3d(pred, gt),
        "lerror": lerror(error_pred, pred, gt),
        "lnormal": lnormal(pred, gt, topo),
        "lbone": lbone(pred, gt, topo),
    }
    total = (
        w.alpha * terms["l3d"]
        + w.beta * terms["lerror"]
        + w.gamma * terms["lnormal"]
        + w.delta * terms["lbone"]
    )
    return LossReport(total=total, **terms)
