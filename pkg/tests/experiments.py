"""Toy-scale trained-model experiments shared by the slow tests.

Checkpoints are cached under ``$REFANIM_CACHE_DIR`` (default ``<repo>/.cache``)
keyed by their full config, so the expensive training runs happen once.
Run ``python tests/experiments.py`` to warm the cache ahead of pytest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from refanim.checkpoint import file_hash, load_checkpoint
from refanim.config import Config, DataSection, ModelSection, TrainSection
from refanim.dataset import build_dataset, load_manifest
from refanim.evaluation import evaluate
from refanim.training import apply_ablation, train_stage

IMAGE_STEPS = 2000
TEMPORAL_STEPS = 500
TEMPORAL_BATCH = 2  # 12-frame windows: 24 frames per step
EVAL_SEEDS = (0, 1, 2)
CLIPS_PER_IDENTITY = 3
VARIANTS = ("full", "baseline+2ref")


def cache_dir() -> Path:
    root = Path(os.environ.get("REFANIM_CACHE_DIR", Path(__file__).resolve().parent.parent / ".cache"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def base_config() -> Config:
    # Narrower than the library default to keep CPU training overnight-sized.
    return Config(
        data=DataSection(),
        model=ModelSection(base_channels=32, semantic_dim=128),
        train=TrainSection(batch_size=8, learning_rate=3e-4, checkpoint_every=500),
    )


def _key(config: Config) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def toy_dataset():
    cfg = base_config()
    root = cache_dir() / f"dataset_{_key(replace(cfg, train=TrainSection()))}"
    if not (root / "meta.json").exists():
        build_dataset(cfg.dataset_config(), root)
    return load_manifest(root)


def trained_checkpoint(variant: str) -> Path:
    dataset = toy_dataset()
    cfg = apply_ablation(base_config(), variant)
    image_cfg = replace(cfg, train=replace(cfg.train, stage="image", steps=IMAGE_STEPS))
    temporal_cfg = replace(cfg, train=replace(cfg.train, stage="temporal", steps=TEMPORAL_STEPS,
                                              batch_size=TEMPORAL_BATCH))
    image_dir = cache_dir() / f"{variant}_image_{_key(image_cfg)}"
    out = cache_dir() / f"{variant}_{_key(temporal_cfg)}"
    final = out / "temporal_final.ckpt"
    if final.exists():
        return final
    image = image_dir / "image_final.ckpt"
    if not image.exists():
        train_stage(image_cfg, dataset, image_dir, log_path=image_dir / "train_image.log")
    train_stage(temporal_cfg, dataset, out, init=image, log_path=out / "train_temporal.log")
    return final


def sweep(variant: str, ref_counts=(1, 2), seeds=EVAL_SEEDS) -> dict[int, dict[str, float]]:
    """Mean held-out PSNR / L1 per reference count, averaged over evaluation seeds (cached)."""
    ckpt_path = trained_checkpoint(variant)
    digest = file_hash(ckpt_path)[:12]
    cache = ckpt_path.parent / f"sweep_{digest}_{'-'.join(map(str, ref_counts))}_{'-'.join(map(str, seeds))}.json"
    if cache.exists():
        return {int(k): v for k, v in json.loads(cache.read_text()).items()}
    ckpt = load_checkpoint(ckpt_path)
    dataset = toy_dataset()
    per_seed = {r: {"psnr_db": [], "l1_mae_255": []} for r in ref_counts}
    for seed in seeds:
        reports = evaluate(ckpt.model, dataset, "test", list(ref_counts), seed, ckpt.config.schedule(),
                           ckpt.config.sampler(), ckpt.config.flags(), clips_per_identity=CLIPS_PER_IDENTITY,
                           checkpoint_hash=digest)
        for rep in reports:
            for key in per_seed[rep.ref_count]:
                per_seed[rep.ref_count][key].append(rep.mean(key))
    result = {r: {key: sum(v) / len(v) for key, v in vals.items()} | {"per_seed": vals}
              for r, vals in per_seed.items()}
    cache.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    for name in sys.argv[1:] or VARIANTS:
        print(name, trained_checkpoint(name), flush=True)
        print(name, json.dumps(sweep(name)), flush=True)
