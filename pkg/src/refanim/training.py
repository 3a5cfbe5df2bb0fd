"""Two-stage training: an image stage on single frames, then a temporal stage.

The temporal stage optimizes only the temporal layers; everything else is
frozen and stays bit-identical.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .dataset import DatasetManifest, TrainingSample, load_sample
from .diffusion import Batch, training_loss
from .networks import AnimationModel
from .pipeline import AblationFlags, images_to_tensor

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "baseline": {"use_pcm": False, "use_selection": False, "fixed_ref_count": 1},
    "baseline+2ref": {"use_pcm": False, "use_selection": False, "fixed_ref_count": 0},
    "baseline+2ref+H": {"use_pcm": True, "use_selection": False, "fixed_ref_count": 0},
    "full": {"use_pcm": True, "use_selection": True, "fixed_ref_count": 0},
}


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float] = field(default_factory=list)
    ref_counts: list[int] = field(default_factory=list)


def draw_ref_count(max_refs: int, rng) -> int:
    """Uniform on ``{1, ..., max_refs}``; ``rng`` is a numpy Generator or a seed."""
    if max_refs < 1:
        raise ValueError(f"max_refs must be >= 1, got {max_refs}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return int(rng.integers(1, max_refs + 1))


def apply_ablation(config: Config, variant: str | None = None, **overrides) -> Config:
    """Config with ablation toggles applied.

    ``use_pcm=False`` replaces correlation maps by ones; ``use_selection=False``
    injects every reference token. ``variant`` is a key of ``ABLATION_VARIANTS``.
    """
    values = dict(ABLATION_VARIANTS[variant]) if variant is not None else {}
    values.update(overrides)
    selection = config.selection
    train = config.train
    if "use_pcm" in values:
        selection = replace(selection, use_pcm=bool(values["use_pcm"]))
    if "use_selection" in values:
        selection = replace(selection, use_selection=bool(values["use_selection"]))
    if "ratio" in values:
        selection = replace(selection, ratio=float(values["ratio"]))
    if "fixed_ref_count" in values:
        train = replace(train, fixed_ref_count=int(values["fixed_ref_count"]))
    return replace(config, selection=selection, train=train)


def variant_name(config: Config) -> str:
    for name, toggles in ABLATION_VARIANTS.items():
        if (config.selection.use_pcm == toggles["use_pcm"]
                and config.selection.use_selection == toggles["use_selection"]
                and (config.train.fixed_ref_count == 1) == (toggles["fixed_ref_count"] == 1)):
            return name
    return "custom"


def collate(samples: list[TrainingSample]) -> Batch:
    return Batch(
        ref_images=images_to_tensor(np.stack([s.ref_images for s in samples])),
        ref_poses=images_to_tensor(np.stack([s.ref_poses for s in samples])),
        tgt_frames=images_to_tensor(np.stack([s.tgt_frames for s in samples])),
        tgt_poses=images_to_tensor(np.stack([s.tgt_poses for s in samples])),
    )


def set_stage_trainable(model: AnimationModel, stage: str) -> list[torch.nn.Parameter]:
    temporal = {id(p) for p in model.temporal.parameters()}
    trainable = []
    for p in model.parameters():
        flag = (id(p) in temporal) == (stage == "temporal")
        p.requires_grad_(flag)
        if flag:
            trainable.append(p)
    return trainable


def train_stage(config: Config, dataset: DatasetManifest, out_dir: str | Path, init: str | Path | None = None,
                log_path: str | Path | None = None) -> TrainResult:
    cfg = config.train
    stage = cfg.stage
    if stage == "temporal" and init is None:
        raise ValueError("the temporal stage needs an image-stage checkpoint as init")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if init is not None:
        ckpt = load_checkpoint(init)
        if ckpt.config.model_config() != config.model_config():
            raise ValueError("init checkpoint was trained with a different model configuration")
        model = ckpt.model
        start_step = ckpt.step if ckpt.stage == stage else 0
    else:
        torch.manual_seed(cfg.seed)
        model = AnimationModel(config.model_config())
        start_step = 0
    model.train()
    params = set_stage_trainable(model, stage)
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    schedule = config.schedule()
    flags: AblationFlags = config.flags()
    mode = "image" if stage == "image" else "temporal"
    window = 1 if stage == "image" else config.model.temporal_window

    rng = np.random.default_rng([cfg.seed, 0x7A, 1 if stage == "image" else 2])
    gen = torch.Generator()
    gen.manual_seed(int(rng.integers(2**62)))
    train_ids = dataset.split("train")
    if not train_ids:
        raise ValueError("dataset has no training identities")
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    result = TrainResult(checkpoint=out_dir / f"{stage}_final.ckpt")
    try:
        for step in range(start_step + 1, start_step + cfg.steps + 1):
            t0 = time.perf_counter()
            n = cfg.fixed_ref_count or draw_ref_count(cfg.max_refs, rng)
            samples = [
                load_sample(dataset, train_ids[int(rng.integers(len(train_ids)))], n, window,
                            seed=int(rng.integers(2**62)))
                for _ in range(cfg.batch_size)
            ]
            assert all(s.N == n for s in samples)
            loss = training_loss(model, collate(samples), schedule, flags, gen, mode)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            value = float(loss.detach())
            result.losses.append(value)
            result.ref_counts.append(n)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            if log_fh is not None:
                log_fh.write(f"{step}, {stage}, {value:.6f}, {n}, {wall_ms:.1f}\n")
                log_fh.flush()
            if step % 50 == 0:
                log.info("step %d stage %s loss %.4f refs %d (%.0f ms)", step, stage, value, n, wall_ms)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"{stage}_{step:06d}.ckpt", model, config, stage, step)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    save_checkpoint(result.checkpoint, model, config, stage, start_step + cfg.steps)
    return result
