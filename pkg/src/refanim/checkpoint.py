"""Checkpoint archive.

A zip file holding ``manifest.json`` and one ``tensors/<name>.bin`` entry per
parameter. Each entry is a header (``b"RFT1"``, uint32 ndim, uint32 dims, all
little-endian) followed by float32 little-endian data.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config, config_from_dict
from .networks import AnimationModel

SCHEMA_VERSION = 1
_MAGIC = b"RFT1"


@dataclass
class Checkpoint:
    model: AnimationModel
    config: Config
    stage: str
    step: int
    path: Path | None = None


def encode_tensor(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(data: bytes) -> torch.Tensor:
    if data[:4] != _MAGIC:
        raise ValueError("bad tensor header")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    arr = np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def component_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head not in AnimationModel.COMPONENTS:
        raise ValueError(f"tensor {name!r} belongs to no known component")
    return head


def save_checkpoint(path: str | Path, model: AnimationModel, config: Config, stage: str, step: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "stage": stage,
        "step": step,
        "config": config.to_dict(),
        "tensors": {name: {"component": component_of(name), "shape": list(t.shape)} for name, t in state.items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_fixed_info("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
        for name, t in state.items():
            zf.writestr(_fixed_info(f"tensors/{name}.bin"), encode_tensor(t))
    tmp.replace(path)
    return path


def _fixed_info(name: str) -> zipfile.ZipInfo:
    # Constant timestamps keep archives byte-reproducible.
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
        config = config_from_dict(manifest["config"])
        model = AnimationModel(config.model_config())
        state = {name: decode_tensor(zf.read(f"tensors/{name}.bin")) for name in manifest["tensors"]}
    model.load_state_dict(state, strict=True)
    model.eval()
    return Checkpoint(model, config, manifest["stage"], int(manifest["step"]), path)


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(io.TextIOWrapper(zf.open("manifest.json"), encoding="utf-8").read())
