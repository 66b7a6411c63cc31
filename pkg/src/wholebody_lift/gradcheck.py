"""Central finite-difference checks of autograd gradients (float64).

Each check reduces a module's output to a scalar with a fixed random
projection, then compares autograd gradients against
``(f(w + eps) - f(w - eps)) / (2 eps)`` on a random subset of entries. The
reported error is ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)`` over the
sampled entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from wholebody_lift import losses
from wholebody_lift.model import (
    BodyPartDecoder,
    JointEmbedding,
    ModelConfig,
    PoseLifter,
    SelfAttentionBlock,
    SemGANLayer,
    SemGraphConv,
)
from wholebody_lift.skeleton import SkeletonTopology, build_adjacency

SUBLAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24s} rel_err={self.rel_error:.3e} tol={self.tolerance:.0e} entries={self.checked}"


def finite_difference_error(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    num_entries: int | None = 20,
    eps: float = 1e-6,
    seed: int = 0,
    reference: Callable[[], torch.Tensor] | None = None,
) -> tuple[float, int]:
    """Relative error between autograd and central differences of scalar ``fn``.

    ``tensors`` must be leaves with ``requires_grad``; they are perturbed in
    place and restored. ``num_entries=None`` checks every entry. When ``fn``
    stops gradients somewhere, ``reference`` is the function autograd actually
    differentiates (stopped quantities frozen) and is used for the differences.
    """
    tensors = list(tensors)
    reference = reference or fn
    grads = torch.autograd.grad(fn(), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    if num_entries is None or num_entries >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=num_entries, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    auto, numeric = [], []
    with torch.no_grad():
        for flat in picks:
            ti = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[ti])
            view = tensors[ti].view(-1)
            orig = view[idx].item()
            view[idx] = orig + eps
            f_plus = reference().item()
            view[idx] = orig - eps
            f_minus = reference().item()
            view[idx] = orig
            numeric.append((f_plus - f_minus) / (2 * eps))
            auto.append(grads[ti].view(-1)[idx].item())
    a, n = np.asarray(auto), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom), len(picks)


def randomize_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Overwrite every parameter with generic random values.

    Zero-initialised residual branches would make many gradients trivially
    zero, so checks run on randomised weights.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            noise = torch.randn(p.shape, generator=g, dtype=p.dtype)
            if p.dim() >= 2:
                p.copy_(noise * p.numel() ** -0.25)
            elif name.endswith("norm.weight") or name.endswith("gcn_norm.weight"):
                p.copy_(1.0 + 0.1 * noise)
            else:
                p.copy_(0.1 * noise)
    return module


def _projected(out: torch.Tensor, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(out.shape, generator=g, dtype=out.dtype)


def _module_check(
    name: str,
    module: nn.Module,
    x: torch.Tensor,
    tol: float,
    num_entries: int | None,
    seed: int,
    reduce: Callable | None = None,
) -> GradCheckResult:
    module = randomize_parameters(module.double().eval(), seed)
    x = x.double().requires_grad_(True)
    with torch.no_grad():
        probe = module(x)
    if reduce is None:
        weights = _projected(probe, seed + 1)

        def fn():
            return (module(x) * weights).sum()
    else:
        fn = reduce(module, x, probe, seed)
    params = [x] + [p for p in module.parameters() if p.requires_grad]
    err, k = finite_difference_error(fn, params, num_entries, seed=seed)
    return GradCheckResult(name, err, tol, k)


def _output_pair_reduce(module, x, probe, seed):
    w1 = _projected(probe[0], seed + 1)
    w2 = _projected(probe[1], seed + 2)

    def fn():
        out = module(x)
        return (out[0] * w1).sum() + (out[1] * w2).sum()

    return fn


def sublayer_checks(
    topo: SkeletonTopology,
    cfg: ModelConfig | None = None,
    num_entries: int = 40,
    seed: int = 0,
) -> list[GradCheckResult]:
    cfg = cfg or ModelConfig()
    dim, heads, joints = cfg.feature_dim, cfg.attention_heads, cfg.num_joints
    adj = build_adjacency(topo)
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(1, joints, dim, generator=g, dtype=torch.float64)
    x_in = torch.randn(1, joints, cfg.input_dim, generator=g, dtype=torch.float64)
    body_lo, body_hi = topo.part_ranges["body"]
    torch.manual_seed(seed)
    return [
        _module_check("embedding", JointEmbedding(joints, cfg.input_dim, dim), x_in, SUBLAYER_TOL, num_entries, seed),
        _module_check(
            "self_attention", SelfAttentionBlock(dim, heads), h[:, body_lo:body_hi], SUBLAYER_TOL, num_entries, seed
        ),
        _module_check("semgcn", SemGraphConv(dim, dim, adj), h, SUBLAYER_TOL, num_entries, seed),
        _module_check("semgan", SemGANLayer(dim, heads, adj), h, SUBLAYER_TOL, num_entries, seed),
        _module_check(
            "decoder",
            BodyPartDecoder(cfg, adj, topo.part_ranges),
            h,
            SUBLAYER_TOL,
            num_entries,
            seed,
            reduce=_output_pair_reduce,
        ),
        _module_check("error_head", nn.Linear(dim, 3), h, SUBLAYER_TOL, None, seed),
    ]


def end_to_end_check(
    topo: SkeletonTopology, cfg: ModelConfig | None = None, num_entries: int = 20, seed: int = 0
) -> GradCheckResult:
    cfg = cfg or ModelConfig()
    torch.manual_seed(seed)
    model = PoseLifter(cfg, topo)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, cfg.num_joints, cfg.input_dim, generator=g)
    return _module_check("end_to_end", model, x, END_TO_END_TOL, num_entries, seed, reduce=_output_pair_reduce)


def _random_poses(seed: int, batch: int, joints: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    gt = torch.randn(batch, joints, 3, generator=g, dtype=torch.float64) * 300
    pred = gt + torch.randn(batch, joints, 3, generator=g, dtype=torch.float64) * 40
    err = torch.rand(batch, joints, 3, generator=g, dtype=torch.float64) * 40
    return pred, err, gt


def loss_checks(topo: SkeletonTopology, num_entries: int = 40, seed: int = 0) -> list[GradCheckResult]:
    pred, err, gt = _random_poses(seed, 2, topo.num_joints)
    pred.requires_grad_(True)
    err.requires_grad_(True)
    w = losses.LossWeights()
    # the error target |gt - pred| carries no gradient, so differences hold it fixed
    target = (gt - pred).abs().detach()

    def frozen_total():
        return (
            w.alpha * losses.l3d(pred, gt)
            + w.beta * losses.l3d(err, target)
            + w.gamma * losses.lnormal(pred, gt, topo)
            + w.delta * losses.lbone(pred, gt, topo)
        )

    cases = {
        "l3d": (lambda: losses.l3d(pred, gt), [pred], None),
        "lerror": (lambda: losses.lerror(err, pred, gt), [err], None),
        "lnormal": (lambda: losses.lnormal(pred, gt, topo), [pred], None),
        "lbone": (lambda: losses.lbone(pred, gt, topo), [pred], None),
        "total": (lambda: losses.total_loss(pred, err, gt, topo, w).total, [pred, err], frozen_total),
    }
    results = []
    for name, (fn, tensors, reference) in cases.items():
        e, k = finite_difference_error(fn, tensors, num_entries, seed=seed, reference=reference)
        results.append(GradCheckResult(f"loss_{name}", e, SUBLAYER_TOL, k))
    return results


def run_all(topo: SkeletonTopology, cfg: ModelConfig | None = None, seed: int = 0) -> list[GradCheckResult]:
    return loss_checks(topo, seed=seed) + sublayer_checks(topo, cfg, seed=seed) + [end_to_end_check(topo, cfg, seed=seed)]
