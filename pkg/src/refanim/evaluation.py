"""Metrics, reference-count sweeps and correlation map inspection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import cv2
import numpy as np
import torch
from PIL import Image

from .dataset import DatasetManifest, load_sample
from .diffusion import NoiseSchedule, SamplerConfig, sample_video
from .networks import AnimationModel
from .pipeline import AblationFlags, images_to_tensor, tensor_to_images
from .render import BACKGROUND, to_uint8

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
PSNR_CAP = 99.0

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "reports"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["ref_count", "records", "aggregates", "metadata"],
                "properties": {
                    "ref_count": {"type": "integer", "minimum": 1},
                    "records": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["clip_id", "l1_mae_255", "psnr_db"],
                            "properties": {
                                "clip_id": {"type": "string"},
                                "l1_mae_255": {"type": "number", "minimum": 0},
                                "psnr_db": {"type": "number", "maximum": PSNR_CAP},
                            },
                        },
                    },
                    "aggregates": {
                        "type": "object",
                        "required": ["l1_mae_255", "psnr_db"],
                    },
                    "metadata": {"type": "object", "required": ["checkpoint_hash", "ratio", "seed", "skipped"]},
                },
            },
        },
    },
}


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def l1_mae(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference of [0, 1] images, reported on the 0-255 scale."""
    _check_shapes(a, b)
    return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))) * 255.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for [0, 1] images, capped at 99 dB for (near) identical inputs."""
    _check_shapes(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


class FeatureDistance(Protocol):
    """Pluggable perceptual/video metric (e.g. LPIPS or FVD backed by a feature network)."""

    name: str

    def __call__(self, generated: np.ndarray, reference: np.ndarray) -> float: ...


FEATURE_METRICS: dict[str, FeatureDistance] = {}


def register_feature_metric(metric: FeatureDistance) -> None:
    FEATURE_METRICS[metric.name] = metric


@dataclass
class ClipRecord:
    clip_id: str
    l1_mae_255: float
    psnr_db: float
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class MetricReport:
    ref_count: int
    records: list[ClipRecord]
    metadata: dict

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for key in ("l1_mae_255", "psnr_db"):
            values = np.array([getattr(r, key) for r in self.records], np.float64)
            out[key] = {
                "mean": float(values.mean()) if len(values) else float("nan"),
                "std": float(values.std()) if len(values) else float("nan"),
            }
        return out

    def mean(self, key: str) -> float:
        return self.aggregates[key]["mean"]

    def to_json(self) -> dict:
        return {
            "ref_count": self.ref_count,
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates,
            "metadata": self.metadata,
        }


def write_report(path: str | Path, reports: list[MetricReport]) -> None:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "reports": [r.to_json() for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _grid(ref: np.ndarray, pose: np.ndarray, gen: np.ndarray, gt: np.ndarray) -> np.ndarray:
    rows = [np.concatenate([ref, pose[f], gen[f], gt[f]], axis=1) for f in range(len(gen))]
    return np.concatenate(rows, axis=0)


@torch.no_grad()
def evaluate(model: AnimationModel, dataset: DatasetManifest, split: str, ref_counts: list[int], seed: int,
             schedule: NoiseSchedule, sampler: SamplerConfig | None = None, flags: AblationFlags = AblationFlags(),
             clip_len: int = 12, clips_per_identity: int = 1, checkpoint_hash: str = "",
             grid_dir: str | Path | None = None,
             progress: Callable[[str], None] | None = None) -> list[MetricReport]:
    """Sweep reference counts over every clip of a split.

    For each clip the largest requested reference set is drawn once; smaller
    counts use its prefix, which follows the same shot-type diversity rule.
    The sampling noise is shared across counts, so rows differ only in the
    references supplied.
    """
    if not ref_counts or min(ref_counts) < 1:
        raise ValueError("ref_counts must be positive integers")
    model.eval()
    ids = dataset.split(split)
    max_r = max(ref_counts)
    records: dict[int, list[ClipRecord]] = {r: [] for r in ref_counts}
    skipped: dict[int, list[str]] = {r: [] for r in ref_counts}
    for id_index, identity_id in enumerate(ids):
        shots = dataset.shots[identity_id]
        rng = np.random.default_rng([seed, id_index, 0xE7A1])
        chosen = rng.choice(len(shots), size=min(clips_per_identity, len(shots)), replace=False)
        for shot_index in sorted(int(c) for c in chosen):
            shot = shots[shot_index]
            clip_id = f"{identity_id}/{shot.shot_id}"
            clip_seed = int(rng.integers(2**62))
            window = min(clip_len, shot.num_frames)
            usable = list(ref_counts)
            sample = None
            for r in sorted(ref_counts, reverse=True):
                try:
                    sample = load_sample(dataset, identity_id, r, window, clip_seed, target_shot=shot.shot_id)
                    break
                except ValueError:
                    log.warning("clip %s: cannot supply %d references, skipping that count", clip_id, r)
                    skipped[r].append(clip_id)
                    usable.remove(r)
            if sample is None:
                continue
            tgt_poses = images_to_tensor(sample.tgt_poses)
            for r in usable:
                refs = images_to_tensor(sample.ref_images[:r])
                ref_poses = images_to_tensor(sample.ref_poses[:r])
                frames = sample_video(model, refs, ref_poses, tgt_poses, schedule, sampler, seed=clip_seed,
                                      flags=flags)
                gen = tensor_to_images(frames)
                rec = ClipRecord(clip_id, l1_mae(gen, sample.tgt_frames), psnr(gen, sample.tgt_frames))
                for name, metric in FEATURE_METRICS.items():
                    rec.extra[name] = float(metric(gen, sample.tgt_frames))
                records[r].append(rec)
                if grid_dir is not None:
                    out = Path(grid_dir) / f"R{r}"
                    out.mkdir(parents=True, exist_ok=True)
                    grid = _grid(sample.ref_images[0], sample.tgt_poses, gen, sample.tgt_frames)
                    Image.fromarray(to_uint8(grid)).save(out / f"{clip_id.replace('/', '__')}.png")
                if progress is not None:
                    progress(f"{clip_id} R={r} psnr={rec.psnr_db:.2f} l1={rec.l1_mae_255:.2f}")
    return [
        MetricReport(r, records[r], {
            "checkpoint_hash": checkpoint_hash,
            "ratio": flags.ratio,
            "use_pcm": flags.use_pcm,
            "use_selection": flags.use_selection,
            "seed": seed,
            "split": split,
            "skipped": skipped[r],
        })
        for r in ref_counts
    ]


def silhouette(image: np.ndarray, tol: float = 0.02) -> np.ndarray:
    """Pixels that differ from the render background."""
    return np.any(np.abs(np.asarray(image) - np.asarray(BACKGROUND, np.float32)) > tol, axis=-1)


def upsample_map(corr_map: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(np.asarray(corr_map, np.float32), (size, size), interpolation=cv2.INTER_LINEAR)


def top_decile_in_silhouette(corr_map: np.ndarray, image: np.ndarray) -> tuple[float, float]:
    """Fraction of the top-decile map pixels that fall on the figure, and the figure's area fraction."""
    sil = silhouette(image)
    up = upsample_map(corr_map, image.shape[0])
    threshold = np.quantile(up, 0.9)
    top = up >= threshold
    return float(np.mean(sil[top])), float(np.mean(sil))


def heatmap_uint8(corr_map: np.ndarray) -> np.ndarray:
    """Per-map min-max normalization to 0-255; a constant map becomes all zeros."""
    m = np.asarray(corr_map, np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0.0:
        return np.zeros(m.shape, np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_raw_map(path_stem: str | Path, corr_map: np.ndarray) -> None:
    stem = Path(path_stem)
    arr = np.asarray(corr_map, dtype="<f4")
    stem.with_suffix(".f32").write_bytes(arr.tobytes())
    meta = {"shape": list(arr.shape), "min": float(arr.min()), "max": float(arr.max()), "dtype": "float32-le"}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_raw_map(path_stem: str | Path) -> np.ndarray:
    stem = Path(path_stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    return np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4").reshape(meta["shape"])


@torch.no_grad()
def correlation_map(model: AnimationModel, ref_pose: np.ndarray, tgt_pose: np.ndarray) -> np.ndarray:
    maps = model.pcm.correlate_all(images_to_tensor(ref_pose[None]), images_to_tensor(tgt_pose[None]))
    return maps[0, 0, 0].cpu().numpy()


def dump_correlation_figure(model: AnimationModel, ref_image: np.ndarray, ref_pose: np.ndarray,
                            tgt_pose: np.ndarray, out: str | Path, name: str = "correlation") -> dict[str, Path]:
    """Write the raw map, its heatmap and an overlay on the reference image."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write correlation figure to {out}: {exc}") from exc
    corr = correlation_map(model, ref_pose, tgt_pose)
    size = ref_image.shape[0]
    save_raw_map(out / name, corr)
    heat = heatmap_uint8(corr)
    heat_big = cv2.resize(heat, (size, size), interpolation=cv2.INTER_NEAREST)
    heat_png = out / f"{name}_heatmap.png"
    Image.fromarray(heat_big).save(heat_png)
    colored = cv2.applyColorMap(heat_big, cv2.COLORMAP_JET)[..., ::-1]
    overlay = (0.5 * to_uint8(ref_image).astype(np.float32) + 0.5 * colored.astype(np.float32)).round()
    overlay_png = out / f"{name}_overlay.png"
    Image.fromarray(overlay.astype(np.uint8)).save(overlay_png)
    return {"raw": out / f"{name}.f32", "sidecar": out / f"{name}.json", "heatmap": heat_png, "overlay": overlay_png}
