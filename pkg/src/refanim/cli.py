"""Command-line entry point: ``refanim <command> [options]``.

Commands: gen-data, train, infer, eval, inspect-correlation. Every command
writes a run manifest into ``--out`` before it starts working. Exit status is
0 on success, 1 on a runtime failure and 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config, ConfigError, load_config
from .render import render_pose_map, to_float, to_uint8

log = logging.getLogger("refanim")

CACHE_ENV = "REFANIM_CACHE_DIR"


class UsageError(Exception):
    pass


def tool_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "0.0.0"


def dataset_hash(root: str | Path) -> str:
    """sha256 over the relative path and bytes of every dataset file (run manifests excluded)."""
    root = Path(root)
    h = hashlib.sha256()
    files = [root / "meta.json"] + sorted(p for p in (root / "identities").rglob("*") if p.is_file())
    for p in files:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    checkpoint_hash: str = ""
    dataset_hash: str = ""
    tool_version: str = field(default_factory=tool_version)
    started_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(path)
        return path


def _config(args) -> Config:
    return load_config(args.config)


def _dataset_root(args, config: Config) -> Path:
    if args.data:
        return Path(args.data)
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        raise UsageError(f"--data is required unless {CACHE_ENV} is set")
    key = hashlib.sha256(json.dumps(config.to_dict()["data"], sort_keys=True).encode()).hexdigest()[:16]
    return Path(cache) / f"dataset_{key}"


def _open_dataset(root: Path, config: Config):
    from .dataset import build_dataset, load_manifest

    if not (root / "meta.json").exists():
        if _in_cache(root):
            log.info("building dataset into cache %s", root)
            return build_dataset(config.dataset_config(), root)
        raise UsageError(f"no dataset at {root}")
    return load_manifest(root)


def _in_cache(root: Path) -> bool:
    cache = os.environ.get(CACHE_ENV)
    return bool(cache) and Path(cache) in root.parents


def _read_image(path: str | Path, resolution: int) -> np.ndarray:
    try:
        img = np.asarray(Image.open(path).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    if img.shape[:2] != (resolution, resolution):
        raise UsageError(f"{path}: expected {resolution}x{resolution}, got {img.shape[1]}x{img.shape[0]}")
    return to_float(img)


def read_pose(path: str | Path, resolution: int) -> np.ndarray:
    """A pose map from a PNG or from a 2D skeleton JSON (14 rows of x, y, visible)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        sk = np.asarray(json.loads(path.read_text(encoding="utf-8")), np.float64)
        if sk.shape != (14, 3):
            raise UsageError(f"{path}: skeleton must be 14x3, got {sk.shape}")
        return render_pose_map(sk, resolution)
    return _read_image(path, resolution)


def _pose_files(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".json"))
    if not files:
        raise UsageError(f"no pose files in {d}")
    return files


def _load_ckpt(path):
    from .checkpoint import file_hash, load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path), file_hash(path)


def _flags(base, args):
    flags = base
    if getattr(args, "no_pcm", False):
        flags = replace(flags, use_pcm=False)
    if getattr(args, "no_selection", False):
        flags = replace(flags, use_selection=False)
    if getattr(args, "k_ratio", None) is not None:
        if not 0.0 < args.k_ratio <= 1.0:
            raise UsageError("--k-ratio must be in (0, 1]")
        flags = replace(flags, ratio=args.k_ratio)
    return flags


def cmd_gen_data(args) -> int:
    from .dataset import build_dataset

    config = _config(args)
    if args.seed is not None:
        config = replace(config, data=replace(config.data, seed=args.seed))
    out = Path(args.out)
    RunManifest("gen-data", args.argv, config.to_dict(), config.data.seed).write(out / "runs" / "gen-data.json")
    manifest = build_dataset(config.dataset_config(), out)
    print(json.dumps({"root": str(out), "counts": manifest.counts,
                      "train_ids": len(manifest.train_ids), "test_ids": len(manifest.test_ids)}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .training import apply_ablation, train_stage

    if args.stage == "temporal" and not args.init:
        raise UsageError("--stage temporal requires --init <image-stage checkpoint>")
    config = _config(args)
    train = replace(config.train, stage=args.stage)
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        train = replace(train, steps=args.steps)
    if args.lr is not None:
        train = replace(train, learning_rate=args.lr)
    config = replace(config, train=train)
    overrides = {}
    if args.no_pcm:
        overrides["use_pcm"] = False
    if args.no_selection:
        overrides["use_selection"] = False
    if args.refs is not None:
        if args.refs < 0:
            raise UsageError("--refs must be >= 0")
        overrides["fixed_ref_count"] = args.refs
    config = apply_ablation(config, **overrides)

    root = _dataset_root(args, config)
    dataset = _open_dataset(root, config)
    out = Path(args.out)
    init_hash = ""
    if args.init:
        from .checkpoint import file_hash
        if not Path(args.init).is_file():
            raise UsageError(f"checkpoint not found: {args.init}")
        init_hash = file_hash(args.init)
    RunManifest("train", args.argv, config.to_dict(), config.train.seed, init_hash,
                dataset_hash(root)).write(out / "runs" / f"train_{args.stage}.json")
    result = train_stage(config, dataset, out, init=args.init, log_path=out / f"train_{args.stage}.log")
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": len(result.losses),
                      "final_loss": result.losses[-1] if result.losses else None}))
    return 0


def cmd_infer(args) -> int:
    import torch

    from .diffusion import sample_video
    from .pipeline import images_to_tensor, tensor_to_images

    if len(args.ref_images) != len(args.ref_poses):
        raise UsageError(f"{len(args.ref_images)} reference images but {len(args.ref_poses)} reference poses")
    ckpt, ckpt_hash = _load_ckpt(args.checkpoint)
    config = ckpt.config
    res = config.data.resolution
    flags = _flags(config.flags(), args)
    refs = np.stack([_read_image(p, res) for p in args.ref_images])
    ref_poses = np.stack([read_pose(p, res) for p in args.ref_poses])
    targets = np.stack([read_pose(p, res) for p in _pose_files(args.target_poses)])
    out = Path(args.out)
    snapshot = config.to_dict()
    snapshot["selection"].update(use_pcm=flags.use_pcm, use_selection=flags.use_selection, ratio=flags.ratio or 0.0)
    RunManifest("infer", args.argv, snapshot, args.seed, ckpt_hash).write(out / "run.json")
    torch.manual_seed(args.seed)
    frames = sample_video(ckpt.model, images_to_tensor(refs), images_to_tensor(ref_poses), images_to_tensor(targets),
                          config.schedule(), config.sampler(), seed=args.seed, flags=flags)
    for i, frame in enumerate(tensor_to_images(frames)):
        Image.fromarray(to_uint8(frame)).save(out / f"{i:06d}.png")
    if args.dump_selection:
        _dump_selection(ckpt.model, refs, ref_poses, targets[:1], flags, out / "selection")
    print(json.dumps({"frames": len(frames), "out": str(out)}))
    return 0


def _dump_selection(model, refs, ref_poses, target, flags, out: Path) -> None:
    import torch

    from .pipeline import correlation_maps, images_to_tensor, site_budgets, to_signed
    from .selection import dump_selection_csv, flatten_bank, sample_compensated, select_topk

    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        ri, rp, tp = (images_to_tensor(a)[None] for a in (refs, ref_poses, target))
        n = ri.shape[1]
        feats = [f.view(1, n, *f.shape[1:]) for f in model.extract_reference_features(to_signed(ri[0]))]
        bank = flatten_bank(feats, correlation_maps(model, rp, tp, flags))
        for layer, k in enumerate(site_budgets(model, n, replace(flags, use_selection=True))):
            dump_selection_csv(out / f"layer{layer}.csv", bank, layer, select_topk(bank, layer, k),
                               sample_compensated(bank, layer, k, 0))


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_report

    try:
        ref_counts = [int(v) for v in args.refs.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--refs must be a comma-separated list of integers: {args.refs}") from exc
    if not ref_counts or min(ref_counts) < 1:
        raise UsageError("--refs values must be >= 1")
    ckpt, ckpt_hash = _load_ckpt(args.checkpoint)
    config = ckpt.config
    root = _dataset_root(args, config)
    dataset = _open_dataset(root, config)
    if args.split not in ("train", "test"):
        raise UsageError(f"unknown split {args.split!r}")
    flags = _flags(config.flags(), args)
    out = Path(args.out)
    RunManifest("eval", args.argv, config.to_dict(), args.seed, ckpt_hash, dataset_hash(root)).write(
        out / "runs" / "eval.json")
    reports = evaluate(ckpt.model, dataset, args.split, ref_counts, args.seed, config.schedule(), config.sampler(),
                       flags, clip_len=args.clip_len, clips_per_identity=args.clips_per_identity,
                       checkpoint_hash=ckpt_hash, grid_dir=None if args.no_grids else out / "grids",
                       progress=log.info)
    write_report(out / "report.json", reports)
    for r in reports:
        print(f"R={r.ref_count} clips={len(r.records)} psnr={r.mean('psnr_db'):.3f} "
              f"l1={r.mean('l1_mae_255'):.3f}")
    return 0


def cmd_inspect_correlation(args) -> int:
    from .evaluation import dump_correlation_figure

    ckpt, ckpt_hash = _load_ckpt(args.checkpoint)
    res = ckpt.config.data.resolution
    ref = _read_image(args.ref_image, res)
    ref_pose = read_pose(args.ref_pose, res)
    tgt_pose = read_pose(args.target_pose, res)
    out = Path(args.out)
    RunManifest("inspect-correlation", args.argv, ckpt.config.to_dict(), args.seed, ckpt_hash).write(
        out / "runs" / "inspect-correlation.json")
    files = dump_correlation_figure(ckpt.model, ref, ref_pose, tgt_pose, out)
    print(json.dumps({k: str(v) for k, v in files.items()}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refanim", description="Multi-reference pose-guided animation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="render the procedural multi-shot dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--data", help=f"dataset directory (default: cache under ${CACHE_ENV})")
    p.add_argument("--stage", choices=("image", "temporal"), required=True)
    p.add_argument("--init", help="checkpoint to start from (required for the temporal stage)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-pcm", action="store_true", help="replace correlation maps by ones")
    p.add_argument("--no-selection", action="store_true", help="inject every reference token")
    p.add_argument("--refs", type=int, help="fixed reference count (0 draws it at random)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="animate references along a target pose sequence")
    common(p, seed_default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref-images", nargs="+", required=True)
    p.add_argument("--ref-poses", nargs="+", required=True)
    p.add_argument("--target-poses", required=True, help="directory of pose PNG or skeleton JSON files")
    p.add_argument("--k-ratio", type=float, help="selection ratio override (default 1/N)")
    p.add_argument("--no-pcm", action="store_true")
    p.add_argument("--no-selection", action="store_true")
    p.add_argument("--dump-selection", action="store_true", help="write per-site selection CSVs for frame 0")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="reference-count sweep on a dataset split")
    common(p, seed_default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--refs", default="1,2", help="comma-separated reference counts")
    p.add_argument("--clip-len", type=int, default=12)
    p.add_argument("--clips-per-identity", type=int, default=1)
    p.add_argument("--k-ratio", type=float)
    p.add_argument("--no-pcm", action="store_true")
    p.add_argument("--no-selection", action="store_true")
    p.add_argument("--no-grids", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-correlation", help="dump one correlation map with heatmap and overlay")
    common(p, seed_default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref-image", required=True)
    p.add_argument("--ref-pose", required=True)
    p.add_argument("--target-pose", required=True)
    p.set_defaults(func=cmd_inspect_correlation)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"refanim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure inside a module
        log.debug("failure", exc_info=True)
        print(f"refanim {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
