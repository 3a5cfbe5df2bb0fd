"""Multi-reference, pose-correlated diffusion for free-viewpoint human animation at toy scale."""

from .config import Config, load_config
from .correlation import PCMConfig, PoseCorrelationModule
from .diffusion import NoiseSchedule, SamplerConfig, sample_clip, sample_video
from .networks import AnimationModel, BackboneConfig, ModelConfig
from .pipeline import AblationFlags

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "AnimationModel",
    "BackboneConfig",
    "Config",
    "ModelConfig",
    "NoiseSchedule",
    "PCMConfig",
    "PoseCorrelationModule",
    "SamplerConfig",
    "load_config",
    "sample_clip",
    "sample_video",
]
