"""Reference conditioning: pose correlation, selection and token assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .networks import AnimationModel
from .selection import budget, dense_tokens, flatten_bank, sample_compensated, select_topk


@dataclass(frozen=True)
class AblationFlags:
    use_pcm: bool = True
    use_selection: bool = True
    ratio: float | None = None  # selection ratio; None means 1/N


@dataclass
class Conditioning:
    tokens: list[torch.Tensor]  # per site (B, T, K, c)
    semantic: torch.Tensor  # (B, N, D)
    expected: list[int]
    maps: torch.Tensor  # (B, N, T, 1, h, w)


def images_to_tensor(images: np.ndarray, device=None, dtype=torch.float32) -> torch.Tensor:
    """``(..., H, W, 3)`` float arrays in [0, 1] to ``(..., 3, H, W)`` tensors."""
    arr = np.ascontiguousarray(images)
    if not arr.flags.writeable:
        arr = arr.copy()
    t = torch.as_tensor(arr, dtype=dtype, device=device)
    return t.movedim(-1, -3)


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().movedim(-3, -1).cpu().numpy()


def to_signed(images: torch.Tensor) -> torch.Tensor:
    return images * 2.0 - 1.0


def from_signed(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def site_budgets(model: AnimationModel, num_refs: int, flags: AblationFlags) -> list[int]:
    if not flags.use_selection:
        return [num_refs * s * s for _, s in model.sites]
    return [budget(s * s, num_refs, flags.ratio) for _, s in model.sites]


def correlation_maps(model: AnimationModel, ref_poses: torch.Tensor, tgt_poses: torch.Tensor,
                     flags: AblationFlags) -> torch.Tensor:
    if flags.use_pcm:
        return model.pcm.correlate_all(ref_poses, tgt_poses)
    b, n = ref_poses.shape[:2]
    t = tgt_poses.shape[1]
    g = model.config.pcm.grid
    return torch.ones(b, n, t, 1, g, g, dtype=ref_poses.dtype, device=ref_poses.device)


def reference_conditioning(model: AnimationModel, ref_images: torch.Tensor, ref_poses: torch.Tensor,
                           tgt_poses: torch.Tensor, flags: AblationFlags, training: bool,
                           generator: torch.Generator | None = None) -> Conditioning:
    """Build injected tokens for every site and frame.

    ``ref_images``/``ref_poses``: ``(B, N, 3, H, W)`` with images in [0, 1];
    ``tgt_poses``: ``(B, T, 3, H, W)``. Training adds as many compensated
    tokens as selected ones; inference injects only the selected tokens.
    """
    b, n = ref_images.shape[:2]
    signed = to_signed(ref_images.flatten(0, 1))
    feats = [f.view(b, n, *f.shape[1:]) for f in model.extract_reference_features(signed)]
    semantic = model.encode_semantic(signed).view(b, n, -1)
    maps = correlation_maps(model, ref_poses, tgt_poses, flags)
    budgets = site_budgets(model, n, flags)
    if not flags.use_selection:
        return Conditioning(dense_tokens(feats, maps), semantic, budgets, maps)
    bank = flatten_bank(feats, maps)
    tokens, expected = [], []
    for layer, k in enumerate(budgets):
        sel = select_topk(bank, layer, k)
        if training:
            comp = sample_compensated(bank, layer, k, generator if generator is not None else 0)
            tokens.append(torch.cat([sel.tokens, comp.tokens], dim=2))
            expected.append(2 * k)
        else:
            tokens.append(sel.tokens)
            expected.append(k)
    return Conditioning(tokens, semantic, expected, maps)


def attention_flops(model: AnimationModel, token_counts: list[int], frames: int = 1) -> int:
    """Multiply-accumulate estimate of one denoiser pass's spatial self-attention.

    Counts key/value projections of the injected tokens plus score and
    weighted-sum products over the enlarged key set; latent-only terms are
    included so the figure is a whole-site cost.
    """
    total = 0
    for (c, s), k in zip(model.sites, token_counts):
        n = s * s
        keys = n + k
        total += 4 * n * c * c  # q, k, v, out projections of latent tokens
        total += 2 * k * c * c  # k, v projections of injected tokens
        total += 2 * n * keys * c  # scores and weighted sum
    return total * frames
