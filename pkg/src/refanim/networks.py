"""Double-network backbone in pixel space.

The reference extractor mirrors the denoiser's encoder path. At every
attention site it records the normalized hidden state that the denoiser's
self-attention would see, so reference tokens and latent tokens live in the
same space. The denoiser concatenates injected reference tokens to the key/value
set of each site's self-attention and discards them afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .correlation import PCMConfig, PoseCorrelationModule
from .layers import Attention, FeedForward, group_norm, sinusoidal_2d, timestep_embedding

MODES = ("image", "temporal")


@dataclass
class BackboneConfig:
    resolution: int = 64
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (16, 8)
    temporal_window: int = 12
    semantic_dim: int = 256
    heads: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)
        if self.resolution % 2 ** len(self.channel_multipliers):
            raise ValueError("resolution must be divisible by 2**len(channel_multipliers)")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pcm: PCMConfig = field(default_factory=PCMConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.pcm, dict):
            self.pcm = PCMConfig(**{**self.pcm, "channels": tuple(self.pcm.get("channels", PCMConfig.channels))})
        if self.pcm.resolution != self.backbone.resolution:
            raise ValueError("pose correlation resolution must match the backbone resolution")


def site_geometry(cfg: BackboneConfig) -> list[tuple[int, int]]:
    """(channels, spatial size) of every attention site, in forward order."""
    sites = []
    res = cfg.resolution
    for mult in cfg.channel_multipliers:
        if res in cfg.attention_levels:
            sites.append((cfg.base_channels * mult, res))
        res //= 2
    if res in cfg.attention_levels:
        sites.append((cfg.base_channels * cfg.channel_multipliers[-1], res))
    return sites


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int | None):
        super().__init__()
        self.norm1 = group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(time_dim, c_out) if time_dim else None
        self.norm2 = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time is not None and temb is not None:
            h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SiteBlock(nn.Module):
    """Spatial self-attention with reference injection, semantic cross-attention, feed-forward."""

    def __init__(self, channels: int, heads: int, semantic_dim: int | None):
        super().__init__()
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = Attention(channels, heads)
        self.cross_attn = None
        if semantic_dim:
            self.norm_cross = nn.LayerNorm(channels)
            self.cross_attn = Attention(channels, heads, context_dim=semantic_dim, zero_out=True)
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = FeedForward(channels, 2)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Normalized site tokens ``(B, h*w, c)``; what reference tokens are made of."""
        return self.norm_self(x.flatten(2).transpose(1, 2))

    def forward(self, x: torch.Tensor, ref_tokens: torch.Tensor | None = None,
                semantic: torch.Tensor | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        hidden = self.norm_self(tokens) + sinusoidal_2d(h, w, c, x.device, x.dtype)
        context = hidden if ref_tokens is None else torch.cat([hidden, ref_tokens], dim=1)
        # Queries are latent positions only, so reference tokens are consumed, never emitted.
        tokens = tokens + self.self_attn(hidden, context)
        if self.cross_attn is not None and semantic is not None:
            tokens = tokens + self.cross_attn(self.norm_cross(tokens), semantic)
        tokens = tokens + self.ff(self.norm_ff(tokens))
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class TemporalLayer(nn.Module):
    """Per-location attention across frames; residual output starts at zero."""

    def __init__(self, channels: int, heads: int, window: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.pos = nn.Parameter(torch.randn(window, channels) * 0.02)
        self.attn = Attention(channels, heads, zero_out=True)

    def forward(self, x: torch.Tensor, frames: int) -> torch.Tensor:
        bt, c, h, w = x.shape
        b = bt // frames
        if frames > self.pos.shape[0]:
            raise ValueError(f"{frames} frames exceed the temporal window {self.pos.shape[0]}")
        seq = x.view(b, frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, frames, c)
        out = self.attn(self.norm(seq) + self.pos[:frames])
        out = out.view(b, h * w, frames, c).permute(0, 2, 3, 1).reshape(bt, c, h, w)
        return x + out


class Encoder(nn.Module):
    """Down path plus the first half of the middle block.

    Shared structure for the reference extractor (no timestep) and the
    denoiser (with timestep).
    """

    def __init__(self, cfg: BackboneConfig, time_dim: int | None, semantic_dim: int | None):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_sites = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        c_prev = base
        res = cfg.resolution
        for level, mult in enumerate(cfg.channel_multipliers):
            c = base * mult
            self.down_res.append(ResBlock(c_prev, c, time_dim))
            if res in cfg.attention_levels:
                self.down_sites[str(level)] = SiteBlock(c, cfg.heads, semantic_dim)
            self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            c_prev = c
            res //= 2
        self.mid_res = ResBlock(c_prev, c_prev, time_dim)
        self.mid_site = SiteBlock(c_prev, cfg.heads, semantic_dim) if res in cfg.attention_levels else None
        self.out_channels = c_prev

    def sites(self) -> list[SiteBlock]:
        out = [self.down_sites[k] for k in sorted(self.down_sites, key=int)]
        if self.mid_site is not None:
            out.append(self.mid_site)
        return out


class ReferenceExtractor(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, time_dim=None, semantic_dim=None)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """``(B, 3, H, W)`` images to per-site ``(B, c_l, h_l, w_l)`` features."""
        res = self.cfg.resolution
        if images.dim() != 4 or images.shape[1] != self.cfg.in_channels or tuple(images.shape[-2:]) != (res, res):
            raise ValueError(f"reference images must be (B, {self.cfg.in_channels}, {res}, {res}), "
                             f"got {tuple(images.shape)}")
        enc = self.encoder
        feats = []
        x = enc.conv_in(images)
        for level, block in enumerate(enc.down_res):
            x = block(x)
            site = enc.down_sites[str(level)] if str(level) in enc.down_sites else None
            if site is not None:
                feats.append(_as_grid(site.hidden(x), x.shape))
                x = site(x)
            x = enc.downsample[level](x)
        x = enc.mid_res(x)
        if enc.mid_site is not None:
            feats.append(_as_grid(enc.mid_site.hidden(x), x.shape))
        return feats


def _as_grid(tokens: torch.Tensor, shape) -> torch.Tensor:
    b, c, h, w = shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class SemanticEncoder(nn.Module):
    """Global appearance embedding, unit-normalized."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.proj = nn.Linear(128, cfg.semantic_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pooled = self.net(images).mean(dim=(2, 3))
        return F.normalize(self.proj(pooled), dim=-1, eps=1e-12)


class PoseGuider(nn.Module):
    """Target pose map to an additive conditioning image; last conv zero-initialized."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, padding=1), nn.SiLU(),
        )
        self.proj = nn.Conv2d(32, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, poses: torch.Tensor) -> torch.Tensor:
        return self.proj(self.net(poses))


class Denoiser(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        self.time_dim = base * 4
        self.time_mlp = nn.Sequential(nn.Linear(base, self.time_dim), nn.SiLU(), nn.Linear(self.time_dim, self.time_dim))
        self.encoder = Encoder(cfg, self.time_dim, cfg.semantic_dim)
        c = self.encoder.out_channels
        self.mid_res2 = ResBlock(c, c, self.time_dim)
        self.upsample = nn.ModuleList()
        self.up_res = nn.ModuleList()
        c_prev = c
        for mult in reversed(cfg.channel_multipliers):
            c_skip = base * mult
            self.upsample.append(nn.Conv2d(c_prev, c_prev, 3, padding=1))
            self.up_res.append(ResBlock(c_prev + c_skip, c_skip, self.time_dim))
            c_prev = c_skip
        self.norm_out = group_norm(c_prev)
        self.conv_out = nn.Conv2d(c_prev, cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, frames: int, ref_tokens: list | None,
                semantic: torch.Tensor | None, temporal: nn.ModuleList | None) -> torch.Tensor:
        """``x``: ``(B*T, C, H, W)``; tokens per site ``(B*T, K, c)``; semantic ``(B*T, N, D)``."""
        enc = self.encoder
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x.dtype))
        site = 0

        def run_site(block: SiteBlock, h: torch.Tensor) -> torch.Tensor:
            nonlocal site
            tokens = ref_tokens[site] if ref_tokens is not None else None
            h = block(h, tokens, semantic)
            if temporal is not None:
                h = temporal[site](h, frames)
            site += 1
            return h

        h = enc.conv_in(x)
        skips = []
        for level, block in enumerate(enc.down_res):
            h = block(h, temb)
            if str(level) in enc.down_sites:
                h = run_site(enc.down_sites[str(level)], h)
            skips.append(h)
            h = enc.downsample[level](h)
        h = enc.mid_res(h, temb)
        if enc.mid_site is not None:
            h = run_site(enc.mid_site, h)
        h = self.mid_res2(h, temb)
        for up, block in zip(self.upsample, self.up_res):
            h = up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class AnimationModel(nn.Module):
    """All trainable components. Parameter prefixes double as checkpoint groups."""

    COMPONENTS = ("pcm", "ref_extractor", "semantic", "pose_guider", "denoiser", "temporal")

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config.backbone
        self.pcm = PoseCorrelationModule(self.config.pcm)
        self.ref_extractor = ReferenceExtractor(cfg)
        self.semantic = SemanticEncoder(cfg)
        self.pose_guider = PoseGuider(cfg)
        self.denoiser = Denoiser(cfg)
        self.sites = site_geometry(cfg)
        self.temporal = nn.ModuleList(TemporalLayer(c, cfg.heads, cfg.temporal_window) for c, _ in self.sites)
        self.injection_log: list[list[int]] | None = None
        self._check_alignment()

    def _check_alignment(self) -> None:
        cfg = self.config.backbone
        with torch.no_grad():
            probe = torch.zeros(1, cfg.in_channels, cfg.resolution, cfg.resolution)
            feats = self.ref_extractor(probe)
        got = [(f.shape[1], f.shape[2]) for f in feats]
        if got != self.sites:
            raise AssertionError(f"reference pyramid {got} does not match denoiser sites {self.sites}")

    def extract_reference_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.ref_extractor(images)

    def encode_semantic(self, images: torch.Tensor) -> torch.Tensor:
        return self.semantic(images)

    def encode_pose_guider(self, poses: torch.Tensor) -> torch.Tensor:
        return self.pose_guider(poses)

    def denoise_step(self, noisy: torch.Tensor, t: torch.Tensor, tgt_poses: torch.Tensor | None,
                     injected: list[torch.Tensor] | None, semantic: torch.Tensor | None, mode: str = "image",
                     expected_tokens: list[int] | None = None) -> torch.Tensor:
        """Predict noise for ``(B, T, C, H, W)`` latents.

        ``injected`` holds per-site ``(B, T, K_l, c_l)`` reference tokens,
        ``semantic`` is ``(B, N, D)``, ``t`` is ``(B,)``. ``mode='image'``
        skips temporal layers.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        b, frames = noisy.shape[:2]
        if mode == "temporal" and frames > self.config.backbone.temporal_window:
            raise ValueError(f"{frames} frames exceed the temporal window")
        x = noisy.flatten(0, 1)
        if tgt_poses is not None:
            x = x + self.pose_guider(tgt_poses.flatten(0, 1))
        tokens = None
        if injected is not None:
            if len(injected) != len(self.sites):
                raise ValueError(f"expected tokens for {len(self.sites)} sites, got {len(injected)}")
            counts = [int(tok.shape[2]) for tok in injected]
            if expected_tokens is not None and counts != list(expected_tokens):
                raise ValueError(f"injected token counts {counts} do not match the selection budget {expected_tokens}")
            for tok, (c, _) in zip(injected, self.sites):
                if tok.shape[:2] != (b, frames) or tok.shape[-1] != c:
                    raise ValueError(f"injected tokens of shape {tuple(tok.shape)} do not fit site width {c}")
            if self.injection_log is not None:
                self.injection_log.append(counts)
            tokens = [tok.flatten(0, 1) for tok in injected]
        sem = None
        if semantic is not None:
            sem = semantic[:, None].expand(b, frames, *semantic.shape[1:]).flatten(0, 1)
        tt = t.reshape(b, 1).expand(b, frames).flatten()
        temporal = self.temporal if mode == "temporal" else None
        out = self.denoiser(x, tt, frames, tokens, sem, temporal)
        return out.view(b, frames, *out.shape[1:])

    def component_parameters(self, component: str):
        if component not in self.COMPONENTS:
            raise KeyError(component)
        return getattr(self, component).parameters()
