import numpy as np
import pytest
import torch

from dismo import augment, datagen
from dismo.errors import ConfigurationError


def _clip(values=None, t=4, res=32):
    if values is None:
        rng = np.random.default_rng(0)
        frames = rng.random((t, res, res, 3)).astype(np.float32)
    else:
        frames = np.full((t, res, res, 3), values, dtype=np.float32)
    return datagen.VideoClip(frames, 6.0, {"identity_id": 1, "action_id": 2, "cam_id": 0}, "c")


def test_identity_params_exact():
    clip = _clip()
    out = augment.apply(clip, augment.PhotometricParams(), augment.GeometricParams())
    assert np.array_equal(out.frames, clip.frames)


def test_brightness_is_multiplicative():
    out = augment.apply(_clip(0.4), augment.PhotometricParams(brightness=1.5),
                        augment.GeometricParams())
    np.testing.assert_allclose(out.frames, 0.6, atol=1e-6)


def test_hflip_involution():
    clip = _clip()
    flip = augment.GeometricParams(hflip=True)
    once = augment.apply(clip, augment.PhotometricParams(), flip)
    twice = augment.apply(once, augment.PhotometricParams(), flip)
    assert np.abs(twice.frames - clip.frames).max() <= 1e-6


def test_sample_params_deterministic():
    cfg = augment.AugmentationConfig()
    a = augment.sample_params(torch.Generator().manual_seed(7), cfg)
    b = augment.sample_params(torch.Generator().manual_seed(7), cfg)
    assert a == b


def test_collapsed_ranges_yield_identity():
    cfg = augment.AugmentationConfig.identity()
    photo, geo = augment.sample_params(torch.Generator().manual_seed(0), cfg)
    assert photo.is_identity() and geo.is_identity()


def test_brightness_draws_stay_in_reference_range():
    cfg = augment.AugmentationConfig()
    rng = torch.Generator().manual_seed(123)
    draws = [augment.sample_params(rng, cfg)[0].brightness for _ in range(10_000)]
    assert min(draws) >= 0.5 and max(draws) <= 1.5


def test_range_law_all_fields():
    cfg = augment.AugmentationConfig()
    rng = torch.Generator().manual_seed(5)
    for _ in range(2000):
        photo, geo = augment.sample_params(rng, cfg)
        assert cfg.brightness[0] <= photo.brightness <= cfg.brightness[1]
        assert cfg.contrast[0] <= photo.contrast <= cfg.contrast[1]
        assert cfg.hue[0] <= photo.hue <= cfg.hue[1]
        assert cfg.saturation[0] <= photo.saturation <= cfg.saturation[1]
        assert cfg.scale[0] <= geo.scale <= cfg.scale[1]
        assert all(cfg.translate[0] <= v <= cfg.translate[1] for v in geo.translate)
        assert cfg.angle[0] <= geo.angle <= cfg.angle[1]
        assert cfg.shear[0] <= geo.shear <= cfg.shear[1]


def test_frame_consistency_same_affine_every_frame():
    geo = augment.GeometricParams(scale=0.8, translate=(0.15, -0.1), angle=20.0, shear=8.0)
    frames = torch.rand(6, 3, 32, 32)
    whole = augment.apply_geometric(frames, geo)
    per_frame = torch.cat([augment.apply_geometric(frames[i:i + 1], geo) for i in range(6)])
    assert torch.equal(whole, per_frame)


def test_label_preservation():
    clip = _clip()
    photo, geo = augment.sample_params(torch.Generator().manual_seed(1),
                                       augment.AugmentationConfig())
    out = augment.apply(clip, photo, geo)
    assert out.labels == clip.labels
    assert out.clip_id == clip.clip_id


def test_output_clipped_to_unit_interval():
    clip = _clip(0.9)
    out = augment.apply(clip, augment.PhotometricParams(brightness=1.5, contrast=1.5),
                        augment.GeometricParams())
    assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0


def test_photometric_order_brightness_then_contrast():
    # order matters: b then c about midpoint 0.5 gives (v*b - 0.5)*c + 0.5
    v, b, c = 0.4, 1.2, 1.4
    out = augment.apply(_clip(v), augment.PhotometricParams(brightness=b, contrast=c),
                        augment.GeometricParams())
    np.testing.assert_allclose(out.frames, (v * b - 0.5) * c + 0.5, atol=1e-6)


def test_invalid_range_rejected():
    with pytest.raises(ConfigurationError, match="augment.brightness"):
        augment.AugmentationConfig(brightness=(1.2, 1.5))
    with pytest.raises(ConfigurationError, match="augment.scale"):
        augment.AugmentationConfig(scale=(0.5, 0.9))
    # disabling the group lifts the identity-element requirement
    augment.AugmentationConfig(scale=(0.5, 0.9), translate=(0.0, 0.0), angle=(0.0, 0.0),
                               shear=(0.0, 0.0), hflip=False, enable_geometric=False)


def test_hue_wraps_modulo_one():
    clip = _clip()
    a = augment.apply(clip, augment.PhotometricParams(hue=0.3), augment.GeometricParams())
    b = augment.apply(a, augment.PhotometricParams(hue=-0.3), augment.GeometricParams())
    assert np.abs(b.frames - clip.frames).max() <= 1e-5


def test_empty_clip_rejected():
    clip = datagen.VideoClip(np.zeros((0, 8, 8, 3), np.float32), 6.0, {}, "e")
    with pytest.raises(ConfigurationError):
        augment.apply(clip, augment.PhotometricParams(), augment.GeometricParams())
