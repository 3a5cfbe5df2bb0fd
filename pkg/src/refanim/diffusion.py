"""Noise schedule, training objective, deterministic sampling and long-video aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import torch
import torch.nn.functional as F

from .networks import AnimationModel
from .pipeline import AblationFlags, from_signed, reference_conditioning, to_signed


class NoiseSchedule:
    """Linear beta schedule with cumulative products kept in float64."""

    def __init__(self, num_train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if num_train_steps < 1:
            raise ValueError("num_train_steps must be >= 1")
        self.num_train_steps = num_train_steps
        self.betas = torch.linspace(beta_start, beta_end, num_train_steps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)

    def check_timestep(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t >= self.num_train_steps).any():
            raise ValueError(f"timestep out of range [0, {self.num_train_steps})")
        return t


@dataclass
class SamplerConfig:
    num_inference_steps: int = 25
    eta: float = 0.0
    window: int = 12
    overlap: int = 4
    clip_denoised: bool = True

    def __post_init__(self):
        if self.eta != 0.0:
            raise ValueError("only the deterministic sampler (eta=0) is supported")
        if not 0 <= self.overlap < self.window:
            raise ValueError("overlap must be in [0, window)")


@dataclass
class Batch:
    ref_images: torch.Tensor  # (B, N, 3, H, W) in [0, 1]
    ref_poses: torch.Tensor
    tgt_frames: torch.Tensor  # (B, T, 3, H, W) in [0, 1]
    tgt_poses: torch.Tensor


def _expand(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return coef.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(clean: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * clean + sqrt(1 - abar_t) * noise``; ``t`` scalar or per leading index."""
    t = schedule.check_timestep(t)
    abar = schedule.alphas_cumprod[t]
    if abar.dim() == 0:
        return abar.sqrt().to(clean.dtype) * clean + (1.0 - abar).sqrt().to(clean.dtype) * noise
    return _expand(abar.sqrt(), clean) * clean + _expand((1.0 - abar).sqrt(), clean) * noise


def training_loss(model: AnimationModel, batch: Batch, schedule: NoiseSchedule, flags: AblationFlags,
                  generator: torch.Generator, mode: str = "image",
                  predict_fn: Callable | None = None) -> torch.Tensor:
    """Noise-prediction MSE for one batch.

    ``predict_fn(noisy, t, noise)`` replaces the network when given (used to
    check the objective itself).
    """
    x0 = to_signed(batch.tgt_frames)
    b = x0.shape[0]
    t = torch.randint(0, schedule.num_train_steps, (b,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    noisy = q_sample(x0, t, noise, schedule)
    if predict_fn is not None:
        pred = predict_fn(noisy, t, noise)
    else:
        cond = reference_conditioning(model, batch.ref_images, batch.ref_poses, batch.tgt_poses, flags,
                                      training=True, generator=generator)
        pred = model.denoise_step(noisy, t, batch.tgt_poses, cond.tokens, cond.semantic, mode, cond.expected)
    return F.mse_loss(pred, noise)


def inference_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Evenly spaced timesteps ending at 0 and starting at the last train step."""
    n = schedule.num_train_steps
    if not 1 <= steps <= n:
        raise ValueError(f"num_inference_steps must be in [1, {n}]")
    return [int(round(n - i * n / steps)) - 1 for i in range(steps)]


def _ddim_update(x: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
                 clip: bool) -> torch.Tensor:
    abar = schedule.alphas_cumprod[t].item()
    abar_prev = schedule.alphas_cumprod[t_prev].item() if t_prev >= 0 else 1.0
    x0 = (x - (1.0 - abar) ** 0.5 * eps) / abar ** 0.5
    if clip:
        x0 = x0.clamp(-1.0, 1.0)
    return abar_prev ** 0.5 * x0 + (1.0 - abar_prev) ** 0.5 * eps


def _prepare(ref_images, ref_poses, tgt_poses):
    if ref_images.dim() == 4:
        ref_images, ref_poses, tgt_poses = ref_images[None], ref_poses[None], tgt_poses[None]
    if ref_images.shape[1] != ref_poses.shape[1]:
        raise ValueError("reference images and poses differ in count")
    return ref_images, ref_poses, tgt_poses


def _initial_noise(shape, seed: int, dtype) -> torch.Tensor:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=dtype)


@torch.no_grad()
def sample_clip(model: AnimationModel, ref_images: torch.Tensor, ref_poses: torch.Tensor, tgt_poses: torch.Tensor,
                schedule: NoiseSchedule, config: SamplerConfig | None = None, seed: int = 0,
                flags: AblationFlags = AblationFlags()) -> torch.Tensor:
    """Generate ``T <= window`` frames ``(T, 3, H, W)`` in [0, 1].

    References are ``(N, 3, H, W)``. Only the selected tokens are injected.
    """
    config = config or SamplerConfig()
    ref_images, ref_poses, tgt_poses = _prepare(ref_images, ref_poses, tgt_poses)
    frames = tgt_poses.shape[1]
    window = min(config.window, model.config.backbone.temporal_window)
    if frames > window:
        raise ValueError(f"{frames} frames exceed the temporal window {window}; use sample_video")
    cond = reference_conditioning(model, ref_images, ref_poses, tgt_poses, flags, training=False)
    x = _initial_noise(tgt_poses.shape, seed, ref_images.dtype)
    ts = inference_timesteps(schedule, config.num_inference_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = model.denoise_step(x, tt, tgt_poses, cond.tokens, cond.semantic, "temporal", cond.expected)
        x = _ddim_update(x, eps, t, t_prev, schedule, config.clip_denoised)
    return from_signed(x)[0]


def window_starts(frames: int, window: int, overlap: int) -> list[int]:
    if frames <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, frames - window + 1, stride))
    if starts[-1] + window < frames:
        starts.append(frames - window)
    return starts


def blend_weights(frames: int, window: int, overlap: int) -> tuple[list[int], list[list[Fraction]]]:
    """Per-window, per-frame blend weights as exact fractions.

    Inside a window the weight ramps linearly over the frames it shares with
    its neighbours; weights are normalized over the windows covering each
    frame, so they sum to exactly 1 everywhere.
    """
    starts = window_starts(frames, window, overlap)
    raw = [[Fraction(0)] * frames for _ in starts]
    for w, s in enumerate(starts):
        e = s + min(window, frames)
        ov_prev = starts[w - 1] + window - s if w > 0 else 0
        ov_next = e - starts[w + 1] if w + 1 < len(starts) else 0
        for f in range(s, e):
            value = Fraction(1)
            if ov_prev > 0:
                value = min(value, Fraction(f - s + 1, ov_prev + 1))
            if ov_next > 0:
                value = min(value, Fraction(e - f, ov_next + 1))
            raw[w][f] = value
    weights = [[Fraction(0)] * frames for _ in starts]
    for f in range(frames):
        total = sum(raw[w][f] for w in range(len(starts)))
        for w in range(len(starts)):
            weights[w][f] = raw[w][f] / total
    return starts, weights


@torch.no_grad()
def sample_video(model: AnimationModel, ref_images: torch.Tensor, ref_poses: torch.Tensor, tgt_poses: torch.Tensor,
                 schedule: NoiseSchedule, config: SamplerConfig | None = None, seed: int = 0,
                 flags: AblationFlags = AblationFlags(), blend: bool = True) -> torch.Tensor:
    """Generate any number of frames with overlapping windows.

    At every denoising step each window predicts noise for its frames and the
    predictions are mixed with the blend weights. ``blend=False`` instead
    tiles non-overlapping windows (a baseline for comparison).
    """
    config = config or SamplerConfig()
    frames = tgt_poses.shape[-4]
    window = min(config.window, model.config.backbone.temporal_window)
    if frames <= window:
        return sample_clip(model, ref_images, ref_poses, tgt_poses, schedule, config, seed, flags)
    ref_images, ref_poses, tgt_poses = _prepare(ref_images, ref_poses, tgt_poses)
    if blend:
        starts, weights = blend_weights(frames, window, config.overlap)
    else:
        starts = list(range(0, frames, window))
        weights = [[Fraction(int(s <= f < s + window)) for f in range(frames)] for s in starts]
    w_tensors = [torch.tensor([float(v) for v in row], dtype=ref_images.dtype) for row in weights]
    cond = reference_conditioning(model, ref_images, ref_poses, tgt_poses, flags, training=False)
    x = _initial_noise(tgt_poses.shape, seed, ref_images.dtype)
    ts = inference_timesteps(schedule, config.num_inference_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = torch.zeros_like(x)
        for s, wt in zip(starts, w_tensors):
            e = min(s + window, frames)
            part = model.denoise_step(x[:, s:e], tt, tgt_poses[:, s:e], [tok[:, s:e] for tok in cond.tokens],
                                      cond.semantic, "temporal", cond.expected)
            eps[:, s:e] += wt[s:e].view(1, -1, 1, 1, 1) * part
        x = _ddim_update(x, eps, t, t_prev, schedule, config.clip_denoised)
    return from_signed(x)[0]
