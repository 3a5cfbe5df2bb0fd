from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from refanim.correlation import PCMConfig  # noqa: E402
from refanim.dataset import DatasetConfig, build_dataset  # noqa: E402
from refanim.networks import AnimationModel, BackboneConfig, ModelConfig  # noqa: E402

torch.set_num_threads(1)


def tiny_model_config(resolution: int = 32, window: int = 12) -> ModelConfig:
    backbone = BackboneConfig(resolution=resolution, base_channels=8, channel_multipliers=(1, 2),
                              attention_levels=(16, 8), temporal_window=window, semantic_dim=16, heads=2)
    pcm = PCMConfig(resolution=resolution, channels=(8, 8, 16), heads=2, depth=2, ff_mult=2)
    return ModelConfig(backbone, pcm)


def randomize_zero_inits(model: AnimationModel, seed: int = 0, scale: float = 0.2) -> AnimationModel:
    """Give the zero-initialized heads random weights so every path is exercised."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if torch.count_nonzero(p) == 0:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config) -> AnimationModel:
    torch.manual_seed(0)
    return AnimationModel(tiny_config).eval()


@pytest.fixture
def random_model(tiny_config) -> AnimationModel:
    torch.manual_seed(0)
    return randomize_zero_inits(AnimationModel(tiny_config)).eval()


SMALL_DATA = DatasetConfig(identities=4, shots_per_id=3, frames_per_shot=14, resolution=32, seed=3)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return build_dataset(SMALL_DATA, tmp_path_factory.mktemp("data") / "ds")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
