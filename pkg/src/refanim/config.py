"""TOML run configuration with sections [data], [model], [diffusion], [selection], [train].

Every key has a default; unknown sections or keys are rejected. TOML has no
null, so ``ratio = 0.0`` means "1/N" and ``fixed_ref_count = 0`` means
"draw the reference count at random".
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .correlation import PCMConfig
from .dataset import DatasetConfig
from .diffusion import NoiseSchedule, SamplerConfig
from .networks import BackboneConfig, ModelConfig
from .pipeline import AblationFlags


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    identities: int = 16
    shots_per_id: int = 6
    frames_per_shot: int = 24
    resolution: int = 64
    train_ratio: float = 0.75
    seed: int = 0


@dataclass
class ModelSection:
    base_channels: int = 64
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    attention_levels: list[int] = field(default_factory=lambda: [16, 8])
    temporal_window: int = 12
    semantic_dim: int = 256
    heads: int = 4
    pcm_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    pcm_heads: int = 4
    pcm_depth: int = 2
    pcm_ff_mult: int = 2


@dataclass
class DiffusionSection:
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_inference_steps: int = 25
    overlap: int = 4


@dataclass
class SelectionSection:
    use_pcm: bool = True
    use_selection: bool = True
    ratio: float = 0.0


@dataclass
class TrainSection:
    stage: str = "image"
    max_refs: int = 4
    fixed_ref_count: int = 0
    batch_size: int = 4
    learning_rate: float = 1e-4
    steps: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 500


@dataclass
class Config:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        if self.train.stage not in ("image", "temporal"):
            raise ConfigError(f"train.stage must be 'image' or 'temporal', got {self.train.stage!r}")
        if self.train.max_refs < 1:
            raise ConfigError("train.max_refs must be >= 1")
        if self.train.fixed_ref_count < 0:
            raise ConfigError("train.fixed_ref_count must be >= 0")
        if not 0.0 <= self.selection.ratio <= 1.0:
            raise ConfigError("selection.ratio must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(**asdict(self.data))

    def model_config(self) -> ModelConfig:
        m = self.model
        backbone = BackboneConfig(
            resolution=self.data.resolution,
            base_channels=m.base_channels,
            channel_multipliers=tuple(m.channel_multipliers),
            attention_levels=tuple(m.attention_levels),
            temporal_window=m.temporal_window,
            semantic_dim=m.semantic_dim,
            heads=m.heads,
        )
        pcm = PCMConfig(resolution=self.data.resolution, channels=tuple(m.pcm_channels), heads=m.pcm_heads,
                        depth=m.pcm_depth, ff_mult=m.pcm_ff_mult)
        return ModelConfig(backbone, pcm)

    def schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return NoiseSchedule(d.num_train_steps, d.beta_start, d.beta_end)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(num_inference_steps=self.diffusion.num_inference_steps,
                             window=self.model.temporal_window, overlap=self.diffusion.overlap)

    def flags(self) -> AblationFlags:
        s = self.selection
        return AblationFlags(use_pcm=s.use_pcm, use_selection=s.use_selection, ratio=s.ratio or None)


_SECTIONS = {f.name: f.default_factory for f in fields(Config)}


def _build_section(name: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    defaults = cls()
    out = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(default, list):
            ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"[{name}] {key}: expected {type(default).__name__}, got {value!r}")
        out[key] = value
    return cls(**out)


def config_from_dict(data: dict) -> Config:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {}
    for f in fields(Config):
        values = data.get(f.name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{f.name}] must be a table")
        sections[f.name] = _build_section(f.name, type(f.default_factory()), values)
    return Config(**sections)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(config: Config) -> str:
    """Render a config as TOML text (flat scalars and integer lists only)."""
    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = f'"{value}"'
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
