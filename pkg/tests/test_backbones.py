import numpy as np
import pytest
import torch

from great.backbones import (
    FeaturePropagation,
    FrozenTextEncoder,
    HashedTextEncoder,
    ImageEncoder,
    PointEncoder,
    build_hierarchy,
    farthest_point_sample,
    fp_upsample,
    image_encode,
    index_points,
    interpolate,
    point_encode,
    text_encode,
    three_nn_weights,
)
from great.dataset import normalize_points
from great.errors import EncodingError, ShapeError
from fd import check, param_check

C = 16
SMALL = dict(npoints=(16, 8, 4), radii=(0.4, 0.8, 1.6), nsample=8)


def sphere(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, generator=g, dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True) * torch.rand(n, 1, generator=g, dtype=torch.float64) ** (1 / 3)


# -- image ----------------------------------------------------------------------


def test_image_zero_input_finite():
    enc = ImageEncoder(C).eval()
    out = image_encode(torch.zeros(3, 224, 224), enc)
    assert out.shape == (1, C, 49) and torch.isfinite(out).all()


def test_image_batch_of_16():
    enc = ImageEncoder(C)
    assert enc(torch.rand(16, 3, 224, 224)).shape == (16, C, 49)


def test_image_deterministic():
    enc = ImageEncoder(C).eval()
    img = torch.rand(1, 3, 224, 224)
    assert torch.equal(enc(img), enc(img.clone()))


def test_image_wrong_channels():
    with pytest.raises(ShapeError):
        ImageEncoder(C)(torch.rand(2, 4, 64, 64))


def test_image_param_gradients():
    enc = ImageEncoder(C, grid=2).double()
    img = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    assert param_check(enc, lambda: enc(img).pow(2).sum(), n=20) < 1e-4


# -- points ---------------------------------------------------------------------


def test_point_pyramid_levels():
    enc = PointEncoder(C)
    pyr = point_encode(sphere(2048).float(), enc)
    assert [c.shape[1] for c, _ in pyr.levels] == [2048, 512, 128, 64]
    assert [f.shape[1] for _, f in pyr.levels] == enc.level_channels
    assert pyr.features.shape == (1, C, 64) and torch.isfinite(pyr.features).all()


def test_fps_permutation_invariant():
    xyz = sphere(300).unsqueeze(0)
    perm = torch.randperm(300)
    a = index_points(xyz, farthest_point_sample(xyz, 40))[0]
    b = index_points(xyz[:, perm], farthest_point_sample(xyz[:, perm], 40))[0]
    key = lambda t: sorted(map(tuple, t.tolist()))
    assert key(a) == key(b)


def test_fps_starts_near_centroid():
    xyz = sphere(100).unsqueeze(0)
    first = farthest_point_sample(xyz, 5)[0, 0]
    assert first == (xyz[0] - xyz[0].mean(0)).norm(dim=1).argmin()


def test_degenerate_cloud():
    with pytest.raises(EncodingError):
        PointEncoder(C)(torch.ones(1, 2048, 3))


def test_level_sizes_must_decrease():
    with pytest.raises(ShapeError):
        build_hierarchy(sphere(64), npoints=(16, 32, 4), radii=(1, 1, 1))


def test_translation_invariant_through_loader():
    raw = sphere(2048, seed=3).numpy() * 2.5
    enc = PointEncoder(C).eval()
    a = enc(torch.from_numpy(normalize_points(raw)).float()).features
    b = enc(torch.from_numpy(normalize_points(raw + np.array([4.0, -7.0, 1.5]))).float()).features
    torch.testing.assert_close(a, b, atol=1e-5, rtol=1e-5)


def test_point_param_gradients():
    enc = PointEncoder(C, **SMALL).double()
    xyz = sphere(64).unsqueeze(0)
    h = enc.hierarchy(xyz)
    assert param_check(enc, lambda: enc(xyz, h).features.pow(2).sum(), n=20) < 1e-4


def test_point_batch_matches_single():
    enc = PointEncoder(C, **SMALL).double()
    xyz = torch.stack([sphere(64, 1), sphere(64, 2)])
    both = enc(xyz).features
    torch.testing.assert_close(both[1], enc(xyz[1]).features[0])


# -- feature propagation ----------------------------------------------------------


def test_interpolate_constant():
    q, r = sphere(50).unsqueeze(0), sphere(10, 1).unsqueeze(0)
    idx, w = three_nn_weights(q, r)
    out = interpolate(torch.full((1, 4, 10), 2.5, dtype=torch.float64), idx, w)
    torch.testing.assert_close(out, torch.full((1, 4, 50), 2.5, dtype=torch.float64))


def test_fp_constant_without_skip():
    enc = PointEncoder(C, **SMALL).double()
    fp = FeaturePropagation(enc.level_channels, C, use_skip=False).double()
    pyr = enc(sphere(64).unsqueeze(0))
    out = fp(pyr, torch.full((1, C, 4), 0.3, dtype=torch.float64))
    assert out.shape == (1, C, 64)
    torch.testing.assert_close(out, out[..., :1].expand_as(out))


def test_coincident_query_gets_full_weight():
    ref = sphere(10).unsqueeze(0)
    idx, w = three_nn_weights(ref[:, 4:5], ref)
    assert idx[0, 0, 0] == 4
    assert w[0, 0, 0] > 1 - 1e-6 and w[0, 0, 1:].sum() < 1e-6


def test_fp_shape_mismatch():
    enc = PointEncoder(C, **SMALL)
    fp = FeaturePropagation(enc.level_channels, C)
    with pytest.raises(ShapeError):
        fp(enc(sphere(64).float()), torch.zeros(1, C, 5))


def test_fp_gradcheck_deep_features():
    enc = PointEncoder(C, **SMALL).double()
    fp = FeaturePropagation(enc.level_channels, C).double()
    pyr = enc(sphere(64).unsqueeze(0))
    deep = torch.randn(1, C, 4, dtype=torch.float64)
    weight = torch.randn(1, C, 64, dtype=torch.float64)
    assert check(lambda x: (fp_upsample(pyr, x, fp) * weight).sum(), deep) < 1e-4


def test_fp_full_resolution():
    enc = PointEncoder(C)
    fp = FeaturePropagation(enc.level_channels, C)
    pyr = enc(sphere(2048).float())
    assert fp(pyr, pyr.features).shape == (1, C, 2048)


# -- text -----------------------------------------------------------------------


def test_text_deterministic():
    enc = HashedTextEncoder(C).eval()
    a, b = text_encode("a person holds the mug", enc), text_encode("a person holds the mug", enc)
    assert torch.equal(a.tokens, b.tokens) and torch.equal(a.pooled, b.pooled)


def test_text_single_token_pooled():
    e = HashedTextEncoder(C)("handle")
    assert e.tokens.shape == (1, C)
    assert torch.equal(e.pooled, e.tokens[0])


def test_text_sixty_tokens():
    sentence = " ".join(f"word{i}" for i in range(60))
    assert HashedTextEncoder(C)(sentence).tokens.shape == (60, C)


def test_text_cap():
    sentence = " ".join(f"word{i}" for i in range(80))
    assert HashedTextEncoder(C)(sentence, max_tokens=64).tokens.shape == (64, C)


@pytest.mark.parametrize("bad", ["", "   "])
def test_text_empty(bad):
    with pytest.raises(ValueError):
        HashedTextEncoder(C)(bad)


def test_text_param_gradients():
    enc = HashedTextEncoder(C, buckets=64).double()
    target = torch.randn(C, dtype=torch.float64)
    assert param_check(enc, lambda: (enc("the handle is a curved loop").pooled * target).sum(), n=20) < 1e-4


def test_frozen_adapter():
    table = torch.randn(5, 7)
    enc = FrozenTextEncoder(lambda text: table[: len(text.split())], 7, C)
    e = enc("one two three")
    assert e.tokens.shape == (3, C)
    assert all(p.requires_grad for p in enc.proj.parameters())
    torch.testing.assert_close(e.pooled, e.tokens.mean(0))
