"""Semantic graph attention lifter: joint embedding, SemGAN encoder, body part decoder.

Shapes follow (batch, joints, features) throughout. Outputs are root-relative
millimetres.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from wholebody_lift.skeleton import SkeletonTopology, build_adjacency

PARTS = ("body", "face", "hands")


@dataclass
class ModelConfig:
    num_joints: int = 133
    input_dim: int = 3
    feature_dim: int = 256
    encoder_layers: int = 4
    attention_heads: int = 8
    dropout: float = 0.1
    decoder_blocks_per_part: int = 2
    # False: every SemGAN layer ends in a SemGCN sublayer. True: only the last one does.
    semgcn_last_layer_only: bool = False
    # True: LayerNorm before each residual sublayer. False: after the residual sum.
    norm_first: bool = True
    # heads regress decimetres internally; outputs are reported in millimetres
    output_scale: float = 100.0

    def __post_init__(self):
        if self.feature_dim % self.attention_heads:
            raise ValueError(
                f"feature_dim={self.feature_dim} is not divisible by attention_heads={self.attention_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.encoder_layers < 1 or self.decoder_blocks_per_part < 0:
            raise ValueError("encoder_layers must be >= 1 and decoder_blocks_per_part >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelOutput(NamedTuple):
    joints_3d: torch.Tensor
    error: torch.Tensor


class JointEmbedding(nn.Module):
    """Shared affine lift of each joint's (x, y, d) plus a learned per-joint code."""

    def __init__(self, num_joints: int, in_dim: int, dim: int):
        super().__init__()
        self.num_joints = num_joints
        self.proj = nn.Linear(in_dim, dim)
        self.index_embed = nn.Parameter(torch.randn(num_joints, dim) * 0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.num_joints or x.shape[2] != self.proj.in_features:
            raise ValueError(
                f"expected input (B, {self.num_joints}, {self.proj.in_features}), got {tuple(x.shape)}"
            )
        return self.proj(x) + self.index_embed


class SemGraphConv(nn.Module):
    """Graph convolution with learned, input-independent edge weights.

    out = act(H W_self + A (H W_neigh) + b), where A is a row-softmax of the
    edge logits restricted to the adjacency mask (self-loops included).
    """

    def __init__(self, in_dim: int, out_dim: int, adjacency, activation: bool = True):
        super().__init__()
        adj = torch.as_tensor(np.asarray(adjacency), dtype=torch.bool)
        if adj.dim() != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got {tuple(adj.shape)}")
        empty = (~adj.any(dim=1)).nonzero().flatten().tolist()
        if empty:
            raise ValueError(f"adjacency rows {empty} have no neighbours; softmax is undefined")
        rows, cols = adj.nonzero(as_tuple=True)
        self.num_nodes = adj.shape[0]
        self.register_buffer("edge_rows", rows, persistent=False)
        self.register_buffer("edge_cols", cols, persistent=False)
        self.W_self = nn.Parameter(torch.empty(in_dim, out_dim))
        self.W_neigh = nn.Parameter(torch.empty(in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        # equal logits -> uniform weights over each neighbourhood at init
        self.edge_logits = nn.Parameter(torch.ones(rows.numel()))
        self.activation = activation
        bound = 1.0 / math.sqrt(in_dim)
        nn.init.uniform_(self.W_self, -bound, bound)
        nn.init.uniform_(self.W_neigh, -bound, bound)

    def edge_weights(self) -> torch.Tensor:
        """Dense (J, J) row-stochastic matrix, zero outside the mask."""
        n = self.num_nodes
        logits = torch.full((n, n), float("-inf"), dtype=self.edge_logits.dtype, device=self.edge_logits.device)
        logits = logits.index_put((self.edge_rows, self.edge_cols), self.edge_logits)
        return torch.softmax(logits, dim=-1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-2] != self.num_nodes:
            raise ValueError(f"expected {self.num_nodes} nodes, got {h.shape[-2]}")
        out = h @ self.W_self + self.edge_weights() @ (h @ self.W_neigh) + self.bias
        return F.gelu(out) if self.activation else out


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention over all tokens, with residual."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, norm_first: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} is not divisible by heads={heads}")
        self.dim = dim
        self.heads = heads
        self.norm_first = norm_first
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attend(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw multi-head attention on already-normalized tokens.

        Returns the projected context (B, N, dim) and weights (B, heads, N, N).
        """
        b, n, _ = x.shape
        hd = self.dim // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(b, n, self.dim)
        return self.out(ctx), weights

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if not self.norm_first:
            y, _ = self.attend(h)
            return self.norm(h + self.drop(y))
        y, _ = self.attend(self.norm(h))
        return h + self.drop(y)


class SemGANLayer(nn.Module):
    """Global self-attention followed by a residual SemGCN sublayer."""

    def __init__(
        self, dim: int, heads: int, adjacency, dropout: float = 0.0, use_gcn: bool = True, norm_first: bool = True
    ):
        super().__init__()
        self.attn = SelfAttentionBlock(dim, heads, dropout, norm_first)
        self.use_gcn = use_gcn
        self.norm_first = norm_first
        if use_gcn:
            self.gcn_norm = nn.LayerNorm(dim)
            self.gcn = SemGraphConv(dim, dim, adjacency)
            nn.init.zeros_(self.gcn.W_self)
            nn.init.zeros_(self.gcn.W_neigh)
            self.drop = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = self.attn(h)
        if not self.use_gcn:
            return h
        if not self.norm_first:
            return self.gcn_norm(h + self.drop(self.gcn(h)))
        return h + self.drop(self.gcn(self.gcn_norm(h)))


class SemGANEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, adjacency):
        super().__init__()
        self.embed = JointEmbedding(cfg.num_joints, cfg.input_dim, cfg.feature_dim)
        n = cfg.encoder_layers
        self.layers = nn.ModuleList(
            SemGANLayer(
                cfg.feature_dim,
                cfg.attention_heads,
                adjacency,
                cfg.dropout,
                use_gcn=(not cfg.semgcn_last_layer_only) or i == n - 1,
                norm_first=cfg.norm_first,
            )
            for i in range(n)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed(x)
        for layer in self.layers:
            h = layer(h)
        return h


class BodyPartDecoder(nn.Module):
    """Per-part attention stacks, then full-graph SemGCN regression and an error head."""

    def __init__(self, cfg: ModelConfig, adjacency, part_ranges: dict):
        super().__init__()
        self.part_ranges = {k: tuple(part_ranges[k]) for k in PARTS}
        cursor = 0
        for name in PARTS:
            lo, hi = self.part_ranges[name]
            if lo != cursor:
                raise ValueError(f"part ranges must be contiguous and ordered, '{name}' starts at {lo}")
            cursor = hi
        if cursor != cfg.num_joints:
            raise ValueError(f"part ranges cover {cursor} joints, model expects {cfg.num_joints}")
        self.parts = nn.ModuleDict(
            {
                name: nn.ModuleList(
                    SelfAttentionBlock(cfg.feature_dim, cfg.attention_heads, cfg.dropout, cfg.norm_first)
                    for _ in range(cfg.decoder_blocks_per_part)
                )
                for name in PARTS
            }
        )
        self.norm = nn.LayerNorm(cfg.feature_dim)
        self.head = SemGraphConv(cfg.feature_dim, 3, adjacency, activation=False)
        self.error_head = nn.Linear(cfg.feature_dim, 3)
        self.output_scale = cfg.output_scale

    def part_features(self, h: torch.Tensor) -> torch.Tensor:
        slabs = []
        for name in PARTS:
            lo, hi = self.part_ranges[name]
            x = h[:, lo:hi]
            for block in self.parts[name]:
                x = block(x)
            slabs.append(x)
        return torch.cat(slabs, dim=1)

    def forward(self, h: torch.Tensor) -> ModelOutput:
        z = self.norm(self.part_features(h))
        return ModelOutput(self.head(z) * self.output_scale, self.error_head(z) * self.output_scale)


class PoseLifter(nn.Module):
    """Full network. ``model.train()`` enables dropout; ``model.eval()`` makes it deterministic."""

    def __init__(self, cfg: ModelConfig, topo: SkeletonTopology):
        super().__init__()
        if topo.num_joints != cfg.num_joints:
            raise ValueError(f"topology has {topo.num_joints} joints, config expects {cfg.num_joints}")
        self.cfg = cfg
        self.topology_version = topo.version
        adjacency = build_adjacency(topo)
        self.encoder = SemGANEncoder(cfg, adjacency)
        self.decoder = BodyPartDecoder(cfg, adjacency, topo.part_ranges)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        return self.decoder(self.encoder(x))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, topo: SkeletonTopology, seed: int | None = None) -> PoseLifter:
    if seed is None:
        return PoseLifter(cfg, topo)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PoseLifter(cfg, topo)
