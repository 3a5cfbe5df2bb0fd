"""Correlation-guided reference token selection.

All reference features of one attention site are flattened into a single
bank, reference-major and row-major within each map, so flat index
``i * n + y * w + x`` addresses reference ``i`` at ``(y, x)``. Per target
frame the bank carries one correlation score per token; the highest scoring
tokens are kept and scaled by their scores. During training an equal number
of uniformly drawn tokens is injected as well.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .correlation import resize_map


@dataclass
class FlatReferenceBank:
    features: list[torch.Tensor]  # per layer (B, N*n_l, c_l)
    corr: list[torch.Tensor]  # per layer (B, T, N*n_l)
    num_refs: int
    grids: list[tuple[int, int]]

    def size(self, layer: int) -> int:
        return self.features[layer].shape[1]

    def unflatten_index(self, layer: int, flat: int) -> tuple[int, int, int]:
        h, w = self.grids[layer]
        if not 0 <= flat < self.num_refs * h * w:
            raise IndexError(f"flat index {flat} out of range for layer {layer}")
        i, rem = divmod(int(flat), h * w)
        y, x = divmod(rem, w)
        return i, y, x

    def unflatten_features(self, layer: int) -> torch.Tensor:
        """Back to ``(B, N, c, h, w)``."""
        h, w = self.grids[layer]
        f = self.features[layer]
        b, _, c = f.shape
        return f.view(b, self.num_refs, h, w, c).permute(0, 1, 4, 2, 3)

    def unflatten_corr(self, layer: int) -> torch.Tensor:
        """Back to ``(B, T, N, h, w)``."""
        h, w = self.grids[layer]
        r = self.corr[layer]
        return r.view(*r.shape[:2], self.num_refs, h, w)


@dataclass
class SelectionResult:
    indices: torch.Tensor  # (B, T, K) flat bank indices
    values: torch.Tensor  # (B, T, K) correlation values at those indices
    tokens: torch.Tensor  # (B, T, K, c) features scaled by values
    layer: int


def flatten_bank(features: list[torch.Tensor], maps: torch.Tensor) -> FlatReferenceBank:
    """Build the flat bank.

    ``features``: per layer ``(N, c, h, w)`` or ``(B, N, c, h, w)``.
    ``maps``: ``(N, 1, h, w)`` for one target frame, ``(N, T, 1, h, w)``, or
    ``(B, N, T, 1, h, w)``. Maps are bilinearly resized to each layer grid.
    """
    if not features:
        raise ValueError("need at least one feature layer")
    if features[0].dim() == 4:
        features = [f[None] for f in features]
        maps = maps[None]
    if maps.dim() == 5:
        # (B, N, 1, h, w): a single target frame.
        maps = maps[:, :, None]
    b, n = features[0].shape[:2]
    if maps.shape[:2] != (b, n):
        raise ValueError(f"maps cover {tuple(maps.shape[:2])} (batch, refs) but features have {(b, n)}")
    flat_feats, flat_corr, grids = [], [], []
    for layer, f in enumerate(features):
        if f.shape[:2] != (b, n):
            raise ValueError(f"layer {layer}: reference count/batch mismatch {tuple(f.shape[:2])} vs {(b, n)}")
        _, _, c, h, w = f.shape
        flat_feats.append(f.permute(0, 1, 3, 4, 2).reshape(b, n * h * w, c))
        r = resize_map(maps, (h, w))  # (B, N, T, 1, h, w)
        flat_corr.append(r.squeeze(3).permute(0, 2, 1, 3, 4).reshape(b, r.shape[2], n * h * w))
        grids.append((h, w))
    return FlatReferenceBank(flat_feats, flat_corr, n, grids)


def stable_topk_indices(r: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest entries along the last axis.

    Ordered by descending value, ties by ascending index, which is exactly a
    stable descending sort truncated to ``k`` but without sorting the row.
    """
    length = r.shape[-1]
    if not 1 <= k <= length:
        raise ValueError(f"k={k} outside [1, {length}]")
    kth = torch.topk(r, k, dim=-1, sorted=False).values.amin(dim=-1, keepdim=True)
    greater = r > kth
    equal = r == kth
    room = k - greater.sum(dim=-1, keepdim=True)
    take = greater | (equal & (torch.cumsum(equal, dim=-1) <= room))
    # Every row keeps exactly k entries; nonzero() lists them row-major.
    idx = take.nonzero(as_tuple=False)[:, -1].view(*r.shape[:-1], k)
    vals = r.gather(-1, idx)
    order = torch.sort(vals, dim=-1, descending=True, stable=True).indices
    return idx.gather(-1, order)


def _check_k(bank: FlatReferenceBank, layer: int, k: int) -> None:
    total = bank.size(layer)
    if not 1 <= k <= total:
        raise ValueError(f"K={k} outside [1, {total}] for layer {layer}")


def fuse(selection_indices: torch.Tensor, bank: FlatReferenceBank, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather selected features and scale each by its correlation value.

    Returns ``(tokens, values)``; gradients reach both features and scores.
    """
    feats = bank.features[layer]
    corr = bank.corr[layer]
    assert int(selection_indices.min()) >= 0 and int(selection_indices.max()) < feats.shape[1], \
        "selection index out of bounds"
    b, t, k = selection_indices.shape
    c = feats.shape[-1]
    values = corr.gather(-1, selection_indices)
    gathered = feats[:, None].expand(b, t, *feats.shape[1:]).gather(
        2, selection_indices[..., None].expand(b, t, k, c))
    return gathered * values[..., None], values


def select_topk(bank: FlatReferenceBank, layer: int, k: int) -> SelectionResult:
    _check_k(bank, layer, k)
    corr = bank.corr[layer]
    if not torch.isfinite(corr).all():
        raise ValueError("correlation values must be finite")
    idx = stable_topk_indices(corr.detach(), k)
    tokens, values = fuse(idx, bank, layer)
    return SelectionResult(idx, values, tokens, layer)


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def sample_compensated(bank: FlatReferenceBank, layer: int, k: int, seed) -> SelectionResult:
    """``k`` tokens per frame drawn uniformly without replacement, correlation-scaled."""
    _check_k(bank, layer, k)
    corr = bank.corr[layer]
    keys = torch.rand(corr.shape, generator=_generator(seed), dtype=torch.float64)
    idx = torch.topk(keys, k, dim=-1).indices.to(corr.device)
    tokens, values = fuse(idx, bank, layer)
    return SelectionResult(idx, values, tokens, layer)


def budget(n_l: int, num_refs: int, ratio: float | None = None, min_fraction: float = 0.25) -> int:
    """Selected token count ``K_l = ceil(ratio * N * n_l)``.

    ``ratio`` defaults to ``1 / N`` so the cost matches one reference. The
    result is clamped to ``[ceil(min_fraction * n_l), N * n_l]``.
    """
    if num_refs < 1:
        raise ValueError(f"num_refs must be >= 1, got {num_refs}")
    total = num_refs * n_l
    if ratio is None:
        k = n_l
    else:
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {ratio}")
        # Round first so that e.g. (1/3) * 3 * n does not creep above n.
        k = math.ceil(round(ratio * total, 9))
    k = max(k, math.ceil(min_fraction * n_l))
    return min(k, total)


def dense_tokens(features: list[torch.Tensor], maps: torch.Tensor) -> list[torch.Tensor]:
    """Every reference token scaled by its map value, flattened per layer.

    This is the unselected enhancement path: ``(B, T, N*n_l, c_l)`` per layer,
    in bank order.
    """
    bank = flatten_bank(features, maps)
    out = []
    for f, r in zip(bank.features, bank.corr):
        out.append(f[:, None] * r[..., None])
    return out


def dump_selection_csv(path: str | Path, bank: FlatReferenceBank, layer: int, topk: SelectionResult,
                       compensated: SelectionResult | None = None, batch: int = 0, frame: int = 0) -> None:
    """One row per bank token for one (batch, frame): position, score and selection flags."""
    chosen = set(topk.indices[batch, frame].tolist())
    sampled = set(compensated.indices[batch, frame].tolist()) if compensated is not None else set()
    corr = bank.corr[layer][batch, frame].detach().cpu().tolist()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flat_index", "ref_index", "y", "x", "correlation_value", "selected_topk",
                         "selected_random"])
        for flat, value in enumerate(corr):
            i, y, x = bank.unflatten_index(layer, flat)
            writer.writerow([flat, i, y, x, repr(float(value)), flat in chosen, flat in sampled])
