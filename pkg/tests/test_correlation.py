from __future__ import annotations

import pytest
import torch
from hypothesis import given, settings, strategies as st

from refanim.correlation import PCMConfig, PoseCorrelationModule, PoseFeature, enhance, resize_map

from oracles import gradient_errors
from conftest import randomize_zero_inits

TOY = PCMConfig(resolution=32, channels=(8, 8, 8), heads=2, depth=2, ff_mult=2)  # 4x4x8 features


def _pcm(config=TOY, seed=0, randomize=False):
    torch.manual_seed(seed)
    pcm = PoseCorrelationModule(config)
    return randomize_zero_inits(pcm, seed) if randomize else pcm


def test_default_feature_shape():
    pcm = _pcm(PCMConfig())
    feat = pcm.encode_pose(torch.rand(2, 3, 64, 64), "reference")
    assert feat.tensor.shape == (2, 128, 8, 8) and feat.origin == "reference"


def test_encoders_have_disjoint_weights():
    pcm = _pcm()
    ref_ids = {id(p) for p in pcm.ref_encoder.parameters()}
    assert not ref_ids & {id(p) for p in pcm.tgt_encoder.parameters()}
    pose = torch.rand(1, 3, 32, 32)
    a = pcm.encode_pose(pose, "reference").tensor
    b = pcm.encode_pose(pose, "target").tensor
    assert not torch.equal(a, b)


def test_black_pose_finite():
    pcm = _pcm()
    feat = pcm.encode_pose(torch.zeros(1, 3, 32, 32), "target").tensor
    assert torch.isfinite(feat).all()


def test_encode_pose_errors():
    pcm = _pcm()
    with pytest.raises(ValueError):
        pcm.encode_pose(torch.rand(1, 3, 16, 16), "reference")
    with pytest.raises(ValueError):
        pcm.encode_pose(torch.rand(1, 3, 32, 32), "other")


def test_correlate_origin_check():
    pcm = _pcm()
    f = pcm.encode_pose(torch.rand(1, 3, 32, 32), "reference")
    with pytest.raises(ValueError):
        pcm.correlate(f, f)
    with pytest.raises(ValueError):
        pcm.correlate_all(torch.rand(0, 3, 32, 32), torch.rand(1, 3, 32, 32))


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_zero_at_init(seed, n, t):
    pcm = _pcm(seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    maps = pcm.correlate_all(torch.randn(n, 3, 32, 32, generator=g) * 3, torch.randn(t, 3, 32, 32, generator=g))
    assert maps.shape == (n, t, 1, 4, 4)
    assert torch.count_nonzero(maps) == 0


def test_batched_equals_pairwise_loop():
    pcm = _pcm(randomize=True)
    refs, tgts = torch.rand(3, 3, 32, 32), torch.rand(2, 3, 32, 32)
    grid = pcm.correlate_all(refs, tgts)
    for i in range(3):
        for j in range(2):
            single = pcm.correlate(pcm.encode_pose(refs[i:i + 1], "reference"),
                                   pcm.encode_pose(tgts[j:j + 1], "target"))
            assert (grid[i, j] - single[0]).abs().max() < 1e-5
    one = pcm.correlate_all(refs[:1], tgts[:1])
    assert one.shape == (1, 1, 1, 4, 4)


def test_reference_permutation_permutes_rows():
    pcm = _pcm(randomize=True)
    refs, tgts = torch.rand(4, 3, 32, 32), torch.rand(2, 3, 32, 32)
    perm = torch.tensor([2, 0, 3, 1])
    a = pcm.correlate_all(refs, tgts)
    b = pcm.correlate_all(refs[perm], tgts)
    assert torch.allclose(a[perm], b, atol=1e-6)


def test_batch_dimension_matches_unbatched():
    pcm = _pcm(randomize=True)
    refs, tgts = torch.rand(2, 3, 3, 32, 32), torch.rand(2, 2, 3, 32, 32)
    batched = pcm.correlate_all(refs, tgts)
    for b in range(2):
        assert torch.allclose(batched[b], pcm.correlate_all(refs[b], tgts[b]), atol=1e-6)


def test_query_key_roles():
    pcm = _pcm(randomize=True)
    q = torch.randn(1, 16, 8)
    kv = torch.randn(1, 16, 8)
    perm = torch.randperm(16)
    base = pcm.transformer(q, kv)
    # Keys/values form an unordered set: permuting them changes nothing.
    assert torch.allclose(pcm.transformer(q, kv[:, perm]), base, atol=1e-6)
    # Queries are processed position-wise: permuting them permutes the output.
    assert torch.allclose(pcm.transformer(q[:, perm], kv), base[:, perm], atol=1e-6)
    # A context whose tokens are all identical makes every query see the same value.
    const = kv[:, :1].expand(1, 16, 8)
    assert torch.allclose(pcm.transformer(q, const), pcm.transformer(q, const[:, perm]), atol=1e-6)


def test_enhance_examples():
    feat = torch.randn(2, 5, 8, 8)
    assert torch.equal(enhance(feat, torch.ones(2, 1, 4, 4)), feat)
    assert torch.count_nonzero(enhance(feat, torch.zeros(2, 1, 4, 4))) == 0
    m = torch.randn(2, 1, 8, 8)
    assert torch.equal(enhance(feat, m), m * feat)
    assert enhance(feat, torch.randn(2, 1, 3, 3)).shape == feat.shape


def test_resize_map_matches_bilinear():
    m = torch.randn(3, 2, 1, 4, 4)
    out = resize_map(m, (8, 8))
    ref = torch.nn.functional.interpolate(m.view(6, 1, 4, 4), size=(8, 8), mode="bilinear", align_corners=False)
    assert torch.equal(out.view(6, 1, 8, 8), ref)


def test_pcm_gradients_match_finite_differences():
    pcm = _pcm(randomize=True).double()
    refs = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    tgts = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    params = list(pcm.parameters())
    errors = gradient_errors(lambda: pcm.correlate_all(refs, tgts).sum(), params, max_entries=24)
    assert max(errors) < 1e-4, errors


def test_enhance_of_correlation_gradients():
    pcm = _pcm(randomize=True).double()
    refs = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    tgts = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    feat = torch.randn(1, 6, 8, 8, dtype=torch.float64, requires_grad=True)

    def fn():
        return (enhance(feat, pcm.correlate_all(refs, tgts)[0]) ** 2).sum()

    errors = gradient_errors(fn, [feat] + list(pcm.f_zero.parameters()) + list(pcm.layers[-1].parameters()),
                             max_entries=24)
    assert max(errors) < 1e-4, errors


def test_pose_feature_dataclass():
    f = PoseFeature(torch.zeros(1, 8, 4, 4), "target")
    assert f.origin == "target"
