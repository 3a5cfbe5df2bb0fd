"""Procedural multi-shot dataset: generation, on-disk layout and sampling.

Layout under ``root``::

    meta.json
    identities/<id>/identity.json
    identities/<id>/shots/<shot_id>/camera.json
    identities/<id>/shots/<shot_id>/frames/%06d.png
    identities/<id>/shots/<shot_id>/poses/%06d.json

Pose files hold 14 ``[x, y, visible]`` rows in normalized canvas
coordinates; pose maps are re-rendered from them on load.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .render import project_and_render, render_pose_map, to_float, to_uint8
from .skeleton import (
    CHEST_REST_Y,
    HEAD_REST_Y,
    JOINT_NAMES,
    SHOT_TYPES,
    CameraSpec,
    IdentitySpec,
    body_to_canvas_y,
    sample_identity,
    synthesize_motion,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Reference scale of the real multi-shot dataset this generator stands in for.
MSTED_STATS = {"identities": 1084, "clips": 15260, "hours": 29.923, "train_ids": 1000, "test_ids": 84}

_ZOOM_RANGES = {"full": (0.9, 1.2), "medium": (1.4, 2.0), "closeup": (2.3, 2.8)}


@dataclass
class DatasetConfig:
    identities: int = 16
    shots_per_id: int = 6
    frames_per_shot: int = 24
    resolution: int = 64
    train_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.identities < 1 or self.shots_per_id < 1 or self.frames_per_shot < 1:
            raise ValueError("identities, shots_per_id and frames_per_shot must be >= 1")
        if not 0.0 < self.train_ratio <= 1.0:
            raise ValueError(f"train_ratio must be in (0, 1], got {self.train_ratio}")


@dataclass(frozen=True)
class ShotRecord:
    shot_id: str
    camera: CameraSpec
    motion_seed: int
    num_frames: int

    @property
    def shot_type(self) -> str:
        return self.camera.shot_type


@dataclass
class DatasetManifest:
    root: Path
    config: DatasetConfig
    identities: dict[str, IdentitySpec]
    shots: dict[str, list[ShotRecord]]
    train_ids: list[str]
    test_ids: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def split(self, name: str) -> list[str]:
        if name == "train":
            return list(self.train_ids)
        if name == "test":
            return list(self.test_ids)
        if name == "all":
            return list(self.identities)
        raise KeyError(f"unknown split {name!r}")

    def shot_dir(self, identity_id: str, shot_id: str) -> Path:
        return self.root / "identities" / identity_id / "shots" / shot_id

    def load_shot(self, identity_id: str, shot_id: str) -> "ShotData":
        return _load_shot_cached(str(self.root), identity_id, shot_id, self.config.resolution)


@dataclass(frozen=True)
class ShotData:
    frames: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    pose_maps: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    skeletons2d: np.ndarray  # (F, 14, 3)


@dataclass
class TrainingSample:
    ref_images: np.ndarray  # (N, H, W, 3)
    ref_poses: np.ndarray  # (N, H, W, 3)
    tgt_frames: np.ndarray  # (T, H, W, 3)
    tgt_poses: np.ndarray  # (T, H, W, 3)
    identity_id: str
    ref_locations: list[tuple[str, int]]
    tgt_shot: str
    tgt_start: int

    @property
    def N(self) -> int:
        return len(self.ref_images)

    @property
    def T(self) -> int:
        return len(self.tgt_frames)


def _shot_cameras(rng: np.random.Generator, shots_per_id: int) -> list[CameraSpec]:
    cams = []
    for k in range(shots_per_id):
        shot_type = SHOT_TYPES[k % len(SHOT_TYPES)]
        lo, hi = _ZOOM_RANGES[shot_type]
        zoom = float(rng.uniform(lo, hi))
        yaw = float(rng.uniform(-math.pi, math.pi))
        pitch = float(rng.uniform(-0.2, 0.2))
        jitter = float(rng.uniform(-0.02, 0.02))
        if shot_type == "full":
            center = (0.5 + jitter, 0.5)
        elif shot_type == "medium":
            center = (0.5 + jitter, body_to_canvas_y(CHEST_REST_Y))
        else:
            center = (0.5 + jitter, body_to_canvas_y(HEAD_REST_Y - 0.06))
        cams.append(CameraSpec(yaw=yaw, pitch=pitch, zoom=zoom, crop_center=center))
    return cams


def plan_dataset(config: DatasetConfig) -> tuple[dict[str, IdentitySpec], dict[str, list[ShotRecord]],
                                                  list[str], list[str]]:
    """Identities, shots and the train/test split as a pure function of config."""
    root_seq = np.random.SeedSequence([config.seed, 0xDA7A])
    identities: dict[str, IdentitySpec] = {}
    shots: dict[str, list[ShotRecord]] = {}
    for idx, child in enumerate(root_seq.spawn(config.identities)):
        ident_seed = int(child.generate_state(1)[0])
        identity_id = f"id_{idx:04d}"
        identities[identity_id] = sample_identity(ident_seed, identity_id)
        rng = np.random.default_rng(child)
        cams = _shot_cameras(rng, config.shots_per_id)
        motion_seeds = rng.integers(0, 2**31 - 1, size=config.shots_per_id)
        shots[identity_id] = [
            ShotRecord(f"shot_{k:02d}", cam, int(ms), config.frames_per_shot)
            for k, (cam, ms) in enumerate(zip(cams, motion_seeds))
        ]
    ids = list(identities)
    order = np.random.default_rng([config.seed, 0x5917]).permutation(len(ids))
    n_train = int(round(config.train_ratio * len(ids)))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return identities, shots, train, test


def render_shot(identity: IdentitySpec, shot: ShotRecord, resolution: int) -> ShotData:
    motion = synthesize_motion(identity, shot.motion_seed, shot.num_frames)
    frames, poses, sk2d = [], [], []
    for joints in motion:
        f, p, s = project_and_render(identity, joints, shot.camera, resolution)
        frames.append(f)
        poses.append(p)
        sk2d.append(s)
    return ShotData(np.stack(frames), np.stack(poses), np.stack(sk2d))


def build_dataset(config: DatasetConfig, out_dir: str | Path) -> DatasetManifest:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    identities, shots, train, test = plan_dataset(config)
    n_frames = 0
    for identity_id, identity in identities.items():
        ident_dir = out / "identities" / identity_id
        ident_dir.mkdir(parents=True, exist_ok=True)
        _write_json(ident_dir / "identity.json", identity.to_json())
        for shot in shots[identity_id]:
            shot_dir = ident_dir / "shots" / shot.shot_id
            (shot_dir / "frames").mkdir(parents=True, exist_ok=True)
            (shot_dir / "poses").mkdir(parents=True, exist_ok=True)
            cam = shot.camera.to_json()
            cam["motion_seed"] = shot.motion_seed
            cam["num_frames"] = shot.num_frames
            _write_json(shot_dir / "camera.json", cam)
            data = render_shot(identity, shot, config.resolution)
            for f in range(shot.num_frames):
                Image.fromarray(to_uint8(data.frames[f])).save(shot_dir / "frames" / f"{f:06d}.png")
                _write_json(shot_dir / "poses" / f"{f:06d}.json", data.skeletons2d[f].tolist())
            n_frames += shot.num_frames
        log.info("wrote identity %s", identity_id)
    counts = {
        "identities": len(identities),
        "shots": sum(len(s) for s in shots.values()),
        "frames": n_frames,
    }
    meta = {
        "schema_version": SCHEMA_VERSION,
        "joint_order": list(JOINT_NAMES),
        "split": {"train": train, "test": test},
        "generator_config": asdict(config),
        "counts": counts,
    }
    _write_json(out / "meta.json", meta)
    return load_manifest(out)


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing meta.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {meta.get('schema_version')}")
    config = DatasetConfig(**meta["generator_config"])
    identities: dict[str, IdentitySpec] = {}
    shots: dict[str, list[ShotRecord]] = {}
    for ident_dir in sorted((root / "identities").iterdir()):
        identity = IdentitySpec.from_json(json.loads((ident_dir / "identity.json").read_text(encoding="utf-8")))
        identities[identity.identity_id] = identity
        records = []
        for shot_dir in sorted((ident_dir / "shots").iterdir()):
            cam = json.loads((shot_dir / "camera.json").read_text(encoding="utf-8"))
            records.append(ShotRecord(shot_dir.name, CameraSpec.from_json(cam), int(cam["motion_seed"]),
                                      int(cam["num_frames"])))
        shots[identity.identity_id] = records
    return DatasetManifest(root, config, identities, shots, list(meta["split"]["train"]),
                           list(meta["split"]["test"]), dict(meta.get("counts", {})))


@lru_cache(maxsize=512)
def _load_shot_cached(root: str, identity_id: str, shot_id: str, resolution: int) -> ShotData:
    shot_dir = Path(root) / "identities" / identity_id / "shots" / shot_id
    frame_paths = sorted((shot_dir / "frames").glob("*.png"))
    frames = np.stack([to_float(np.asarray(Image.open(p).convert("RGB"))) for p in frame_paths])
    sk = np.stack([np.asarray(json.loads(p.read_text(encoding="utf-8")), np.float64)
                   for p in sorted((shot_dir / "poses").glob("*.json"))])
    poses = np.stack([to_float(render_pose_map(s, resolution)) for s in sk])
    frames.setflags(write=False)
    poses.setflags(write=False)
    return ShotData(frames, poses, sk)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def select_references(shots: list[ShotRecord], tgt_shot: str, tgt_frames: range, ref_count: int,
                      rng: np.random.Generator) -> list[tuple[str, int]]:
    """Pick reference frames, round-robin over shot types.

    The pool is every frame of the other shots; an identity with a single
    shot falls back to that shot's frames outside the target window. Types
    are visited in a random order each round, so no type contributes more
    than ``ceil(ref_count / k)`` frames when ``k`` types are available.
    Any prefix of the returned list obeys the same rule.
    """
    others = [s for s in shots if s.shot_id != tgt_shot]
    if others:
        pool = [(s.shot_type, s.shot_id, f) for s in others for f in range(s.num_frames)]
    else:
        only = shots[0]
        pool = [(only.shot_type, only.shot_id, f) for f in range(only.num_frames) if f not in tgt_frames]
    if ref_count < 1 or ref_count > len(pool):
        raise ValueError(f"ref_count={ref_count} outside the available pool of {len(pool)} frames")
    by_type: dict[str, list[tuple[str, int]]] = {}
    for shot_type, shot_id, f in pool:
        by_type.setdefault(shot_type, []).append((shot_id, f))
    types = sorted(by_type)
    for t in types:
        rng.shuffle(by_type[t])
    type_order = [types[i] for i in rng.permutation(len(types))]
    picked: list[tuple[str, int]] = []
    while len(picked) < ref_count:
        for t in type_order:
            if by_type[t] and len(picked) < ref_count:
                picked.append(by_type[t].pop())
    return picked


def load_sample(dataset: DatasetManifest, identity_id: str, ref_count: int, window: int, seed,
                target_shot: str | None = None) -> TrainingSample:
    if identity_id not in dataset.identities:
        raise KeyError(f"unknown identity {identity_id!r}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    rng = np.random.default_rng(seed)
    shots = dataset.shots[identity_id]
    if target_shot is None:
        tgt = shots[int(rng.integers(len(shots)))]
    else:
        tgt = next((s for s in shots if s.shot_id == target_shot), None)
        if tgt is None:
            raise KeyError(f"unknown shot {target_shot!r} for {identity_id}")
    if window > tgt.num_frames:
        raise ValueError(f"window {window} longer than shot ({tgt.num_frames} frames)")
    start = int(rng.integers(tgt.num_frames - window + 1))
    tgt_range = range(start, start + window)
    refs = select_references(shots, tgt.shot_id, tgt_range, ref_count, rng)

    tgt_data = dataset.load_shot(identity_id, tgt.shot_id)
    ref_images, ref_poses = [], []
    for shot_id, f in refs:
        data = dataset.load_shot(identity_id, shot_id)
        ref_images.append(data.frames[f])
        ref_poses.append(data.pose_maps[f])
    return TrainingSample(
        ref_images=np.stack(ref_images),
        ref_poses=np.stack(ref_poses),
        tgt_frames=np.array(tgt_data.frames[start:start + window]),
        tgt_poses=np.array(tgt_data.pose_maps[start:start + window]),
        identity_id=identity_id,
        ref_locations=refs,
        tgt_shot=tgt.shot_id,
        tgt_start=start,
    )
