"""Pose correlation module.

Two pose encoders of identical architecture (separate weights) embed the
reference and target pose maps; a stack of cross-attention layers lets each
reference location query the target pose, and a zero-initialized 1x1
convolution reads out one correlation score per reference location.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Attention, FeedForward, group_norm, sinusoidal_2d

ORIGINS = ("reference", "target")


@dataclass
class PCMConfig:
    resolution: int = 64
    channels: tuple[int, ...] = (32, 64, 128)
    heads: int = 4
    depth: int = 2
    ff_mult: int = 2

    @property
    def dim(self) -> int:
        return self.channels[-1]

    @property
    def grid(self) -> int:
        return self.resolution // 2 ** len(self.channels)


@dataclass
class PoseFeature:
    tensor: torch.Tensor  # (B, d, h, w)
    origin: str


class PoseEncoder(nn.Module):
    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers = []
        c_in = 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), group_norm(c), nn.SiLU()]
            c_in = c
        self.net = nn.Sequential(*layers)

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        return self.net(pose)


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        return x + self.ff(self.norm_ff(x))


class PoseCorrelationModule(nn.Module):
    def __init__(self, config: PCMConfig | None = None):
        super().__init__()
        self.config = config or PCMConfig()
        cfg = self.config
        self.ref_encoder = PoseEncoder(cfg.channels)
        self.tgt_encoder = PoseEncoder(cfg.channels)
        self.layers = nn.ModuleList(CrossAttentionLayer(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.depth))
        self.f_zero = nn.Conv2d(cfg.dim, 1, kernel_size=1)
        nn.init.zeros_(self.f_zero.weight)
        nn.init.zeros_(self.f_zero.bias)

    def encode_pose(self, pose: torch.Tensor, which: str) -> PoseFeature:
        if which not in ORIGINS:
            raise ValueError(f"which must be one of {ORIGINS}, got {which!r}")
        res = self.config.resolution
        if pose.dim() != 4 or pose.shape[1] != 3 or tuple(pose.shape[-2:]) != (res, res):
            raise ValueError(f"pose must be (B, 3, {res}, {res}), got {tuple(pose.shape)}")
        encoder = self.ref_encoder if which == "reference" else self.tgt_encoder
        return PoseFeature(encoder(pose), which)

    def transformer(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Run the cross-attention stack on already position-coded tokens."""
        x = queries
        for layer in self.layers:
            x = layer(x, context)
        return x

    def _tokens(self, feat: torch.Tensor) -> torch.Tensor:
        b, d, h, w = feat.shape
        tokens = feat.flatten(2).transpose(1, 2)
        return tokens + sinusoidal_2d(h, w, d, feat.device, feat.dtype)

    def correlate(self, ref_feat: PoseFeature, tgt_feat: PoseFeature) -> torch.Tensor:
        """Correlation map ``(B, 1, h, w)`` on the reference grid."""
        if ref_feat.origin != "reference" or tgt_feat.origin != "target":
            raise ValueError(f"expected (reference, target) features, got ({ref_feat.origin}, {tgt_feat.origin})")
        ref = ref_feat.tensor
        b, d, h, w = ref.shape
        x = self.transformer(self._tokens(ref), self._tokens(tgt_feat.tensor))
        return self.f_zero(x.transpose(1, 2).reshape(b, d, h, w))

    def correlate_all(self, ref_poses: torch.Tensor, tgt_poses: torch.Tensor) -> torch.Tensor:
        """All reference/target pairs in one batched pass.

        ``ref_poses`` is ``(N, 3, H, W)`` or ``(B, N, 3, H, W)``; likewise
        ``tgt_poses`` with ``T``. Returns ``(N, T, 1, h, w)`` (or with a
        leading ``B``) where entry ``[i, j]`` correlates reference ``i`` with
        target ``j``.
        """
        unbatched = ref_poses.dim() == 4
        if unbatched:
            ref_poses, tgt_poses = ref_poses[None], tgt_poses[None]
        b, n = ref_poses.shape[:2]
        t = tgt_poses.shape[1]
        if n < 1 or t < 1:
            raise ValueError("need at least one reference pose and one target pose")
        ref = self.encode_pose(ref_poses.flatten(0, 1), "reference").tensor
        tgt = self.encode_pose(tgt_poses.flatten(0, 1), "target").tensor
        d, h, w = ref.shape[1:]
        ref = ref.view(b, n, 1, d, h, w).expand(b, n, t, d, h, w).reshape(b * n * t, d, h, w)
        tgt = tgt.view(b, 1, t, d, h, w).expand(b, n, t, d, h, w).reshape(b * n * t, d, h, w)
        maps = self.correlate(PoseFeature(ref, "reference"), PoseFeature(tgt, "target"))
        maps = maps.view(b, n, t, 1, h, w)
        return maps[0] if unbatched else maps

    def forward(self, ref_poses: torch.Tensor, tgt_poses: torch.Tensor) -> torch.Tensor:
        return self.correlate_all(ref_poses, tgt_poses)


def resize_map(corr_map: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ``(..., 1, h, w)`` maps; identity when sizes match."""
    if tuple(corr_map.shape[-2:]) == tuple(size):
        return corr_map
    lead = corr_map.shape[:-3]
    flat = corr_map.reshape(-1, 1, *corr_map.shape[-2:])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, 1, *size)


def enhance(ref_feature: torch.Tensor, corr_map: torch.Tensor) -> torch.Tensor:
    """Scale a ``(..., c, h, w)`` reference feature by its resized correlation map."""
    return resize_map(corr_map, tuple(ref_feature.shape[-2:])) * ref_feature
