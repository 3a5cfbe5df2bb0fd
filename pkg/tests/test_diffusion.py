from __future__ import annotations

from fractions import Fraction

import pytest
import torch
from hypothesis import given, settings, strategies as st

from refanim.diffusion import (Batch, NoiseSchedule, SamplerConfig, blend_weights, inference_timesteps, q_sample,
                               sample_clip, sample_video, training_loss, window_starts)
from refanim.pipeline import AblationFlags


def test_schedule_invariants():
    s = NoiseSchedule()
    assert ((s.betas > 0) & (s.betas < 1)).all()
    assert (s.alphas_cumprod[1:] < s.alphas_cumprod[:-1]).all()
    assert torch.isfinite(s.alphas_cumprod).all()
    assert abs(s.alphas_cumprod[0].item() - (1 - 1e-4)) < 1e-12


def test_q_sample_examples():
    s = NoiseSchedule()
    x = torch.rand(2, 3, 4, 4) * 2 - 1
    noise = torch.randn_like(x)
    out0 = q_sample(x, 0, noise, s)
    assert (out0 - x).abs().max() < 0.011 * noise.abs().max() + 1e-4
    assert abs(s.alphas_cumprod[0].sqrt().item() - 0.99995) < 1e-6
    # Independent recomputation of abar_999 from the stated linear betas.
    abar = 1.0
    for k in range(1000):
        abar *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / 999)
    assert abar ** 0.5 < 0.1
    assert abs(s.alphas_cumprod[999].item() - abar) < 1e-12
    zero = q_sample(x, 500, torch.zeros_like(x), s)
    assert torch.equal(zero, s.alphas_cumprod[500].sqrt().float() * x)
    per = q_sample(x, torch.tensor([3, 700]), noise, s)
    assert torch.allclose(per[1], q_sample(x[1:], 700, noise[1:], s)[0])
    with pytest.raises(ValueError):
        q_sample(x, 1000, noise, s)
    with pytest.raises(ValueError):
        q_sample(x, -1, noise, s)


def _batch(b=2, n=2, t=1, res=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Batch(*(torch.rand(b, k, 3, res, res, generator=g) for k in (n, n, t, t)))


def test_loss_with_oracle_predictors(tiny_model):
    s = NoiseSchedule()
    batch = _batch(b=8, t=2)
    g = torch.Generator().manual_seed(0)
    exact = training_loss(tiny_model, batch, s, AblationFlags(), g, predict_fn=lambda x, t, eps: eps)
    assert exact.item() == 0.0
    big = _batch(b=64, t=4)
    zero = training_loss(tiny_model, big, s, AblationFlags(), g, predict_fn=lambda x, t, eps: torch.zeros_like(eps))
    assert abs(zero.item() - 1.0) < 0.05


def test_loss_finite_positive_and_deterministic(tiny_model):
    s = NoiseSchedule()
    batch = _batch()
    a = training_loss(tiny_model, batch, s, AblationFlags(), torch.Generator().manual_seed(5))
    b = training_loss(tiny_model, batch, s, AblationFlags(), torch.Generator().manual_seed(5))
    assert torch.isfinite(a) and a.item() > 0 and a.item() == b.item()


def test_inference_timesteps():
    s = NoiseSchedule()
    ts = inference_timesteps(s, 25)
    assert len(ts) == 25 and ts[0] == 999 and ts == sorted(ts, reverse=True)
    assert inference_timesteps(s, 1) == [999]
    with pytest.raises(ValueError):
        inference_timesteps(s, 0)
    with pytest.raises(ValueError):
        SamplerConfig(eta=0.5)


def _clip_inputs(n=2, t=3, res=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, res, res, generator=g), torch.rand(n, 3, res, res, generator=g),
            torch.rand(t, 3, res, res, generator=g))


def test_sample_clip_deterministic_and_bounded(random_model):
    refs, ref_poses, tgt = _clip_inputs()
    cfg = SamplerConfig(num_inference_steps=3)
    a = sample_clip(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=4)
    b = sample_clip(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=4)
    assert a.shape == (3, 3, 32, 32) and torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    one = sample_clip(random_model, refs, ref_poses, tgt, NoiseSchedule(), SamplerConfig(num_inference_steps=1))
    assert torch.isfinite(one).all()


def test_sample_clip_rejects_long_input(random_model):
    refs, ref_poses, tgt = _clip_inputs(t=13)
    with pytest.raises(ValueError):
        sample_clip(random_model, refs, ref_poses, tgt, NoiseSchedule(), SamplerConfig(num_inference_steps=1))


def test_sampling_injects_k_tokens(random_model):
    refs, ref_poses, tgt = _clip_inputs(n=3)
    random_model.injection_log = []
    sample_clip(random_model, refs, ref_poses, tgt, NoiseSchedule(), SamplerConfig(num_inference_steps=2))
    n_l = [s * s for _, s in random_model.sites]
    assert random_model.injection_log == [n_l, n_l]


def test_window_examples():
    assert window_starts(12, 12, 4) == [0]
    assert window_starts(20, 12, 4) == [0, 8]
    starts, w = blend_weights(20, 12, 4)
    for f in range(8, 12):
        assert w[0][f] + w[1][f] == 1
    assert w[0][0] == 1 and w[1][19] == 1


@given(st.integers(1, 80), st.integers(2, 16), st.data())
@settings(max_examples=200, deadline=None)
def test_partition_of_unity(frames, window, data):
    overlap = data.draw(st.integers(0, window - 1))
    starts, weights = blend_weights(frames, window, overlap)
    for f in range(frames):
        assert sum(weights[w][f] for w in range(len(starts))) == Fraction(1)
        for w, s in enumerate(starts):
            if not s <= f < s + window:
                assert weights[w][f] == 0
            assert weights[w][f] >= 0
    covered = set()
    for s in starts:
        assert 0 <= s and s + min(window, frames) <= frames
        covered.update(range(s, s + window))
    assert covered >= set(range(frames))


def test_video_equals_clip_for_short_sequences(random_model):
    refs, ref_poses, tgt = _clip_inputs(t=12)
    cfg = SamplerConfig(num_inference_steps=2)
    clip = sample_clip(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=1)
    video = sample_video(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=1)
    assert torch.equal(clip, video)


def test_long_video_shape_and_determinism(random_model):
    refs, ref_poses, tgt = _clip_inputs(t=20)
    cfg = SamplerConfig(num_inference_steps=2)
    a = sample_video(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=2)
    b = sample_video(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=2)
    assert a.shape == (20, 3, 32, 32) and torch.equal(a, b)
    tiled = sample_video(random_model, refs, ref_poses, tgt, NoiseSchedule(), cfg, seed=2, blend=False)
    assert tiled.shape == a.shape
