import numpy as np
import pytest
import torch

from dismo.errors import ConfigurationError
from dismo.models import (
    FlowSample,
    FrameGenerator,
    GeneratorConditioning,
    MotionExtractor,
    MotionExtractorConfig,
    fm_loss,
)
from dismo.models.motion import MotionSequence

from conftest import tiny_extractor_config, tiny_generator_config


def test_embed_frames_token_shape_64px():
    cfg = MotionExtractorConfig(patch_size=8, frame_embed_depth=1, frame_embed_dim=32,
                                sequence_depth=1, sequence_dim=32, motion_dim=8,
                                num_frames=8, frame_size=64, num_heads=2)
    ext = MotionExtractor(cfg).eval()
    clip = torch.rand(1, 8, 3, 64, 64)
    tokens = ext.embed_frames(clip)
    assert tokens.shape == (1, 8, 64, 32)  # (64/8)^2 = 64 patches


def test_embed_frames_identical_frames_identical_rows():
    ext = MotionExtractor(tiny_extractor_config()).eval()
    frame = torch.rand(1, 1, 3, 32, 32)
    clip = frame.expand(1, 8, 3, 32, 32).contiguous()
    tokens = ext.embed_frames(clip)
    for t in range(1, 8):
        assert torch.equal(tokens[0, t], tokens[0, 0])


def test_zero_clip_finite():
    ext = MotionExtractor(tiny_extractor_config()).eval()
    with torch.no_grad():
        m = ext(torch.zeros(1, 8, 3, 32, 32))
    assert torch.isfinite(m).all()


def test_extract_shape_and_determinism():
    ext = MotionExtractor(tiny_extractor_config())
    clip = np.random.default_rng(0).random((8, 32, 32, 3)).astype(np.float32)
    a = ext.extract(clip, clip_id="x")
    b = ext.extract(clip, clip_id="x")
    assert a.embeddings.shape == (8, 8)
    assert np.array_equal(a.embeddings, b.embeddings)


def test_extract_sensitive_to_sprite_shift():
    from dismo import datagen
    ids = datagen.default_identities(1, size_px=8)
    cam = datagen.CameraProgram(0, "none")
    still = datagen.MotionProgram(0, "still")
    moving = datagen.MotionProgram(0, "linear", {"vx": 2.0, "vy": 0.0})
    a = datagen.render_clip(ids[0], still, cam, 8, 32, seed=3)
    b = datagen.render_clip(ids[0], moving, cam, 8, 32, seed=3)
    ext = MotionExtractor(tiny_extractor_config())
    ma = ext.extract(a.frames).embeddings
    mb = ext.extract(b.frames).embeddings
    assert np.linalg.norm(ma - mb) > 0


def test_wrong_clip_shape_rejected():
    ext = MotionExtractor(tiny_extractor_config()).eval()
    with pytest.raises(ConfigurationError, match="does not match config"):
        ext(torch.rand(1, 7, 3, 32, 32))
    with pytest.raises(ConfigurationError, match="does not match config"):
        ext(torch.rand(1, 8, 3, 16, 16))


def test_bottleneck_asserted_at_construction():
    # payload 1 * 2048 vs budget 0.25 * 64 tokens/frame... far too wide
    with pytest.raises(ConfigurationError, match="bottleneck"):
        MotionExtractorConfig(patch_size=8, frame_embed_dim=64, motion_dim=2048,
                              num_frames=8, frame_size=64, num_heads=2)


def test_temporal_encoding_breaks_permutation_invariance():
    torch.manual_seed(0)
    ext = MotionExtractor(tiny_extractor_config()).eval()
    clip = torch.rand(1, 8, 3, 32, 32)
    perm = torch.tensor([3, 1, 7, 0, 2, 6, 4, 5])
    with torch.no_grad():
        m = ext(clip)
        mp = ext(clip[:, perm])
    assert (m - mp).norm() > 0


def test_gradient_flow_to_every_extractor_parameter():
    torch.manual_seed(1)
    ext = MotionExtractor(tiny_extractor_config()).double()
    gen = FrameGenerator(tiny_generator_config()).double()
    clip = torch.rand(2, 8, 3, 32, 32, dtype=torch.float64)
    m = ext(clip)
    cond = GeneratorConditioning(source_frame=clip[:, 0], motion=m[:, 0],
                                 delta=torch.full((2,), 2, dtype=torch.long))
    sample = FlowSample.build(torch.randn(2, 3, 32, 32, dtype=torch.float64),
                              clip[:, 2], torch.rand(2, dtype=torch.float64), cond)
    loss = fm_loss(gen, sample)
    loss.backward()
    for name, param in ext.named_parameters():
        assert param.grad is not None, name
        assert param.grad.norm() > 0, name


def test_motion_sequence_invariants():
    with pytest.raises(ConfigurationError):
        MotionSequence(np.array([1.0, 2.0]))
    with pytest.raises(ConfigurationError):
        MotionSequence(np.full((8, 4), np.nan))
    seq = MotionSequence(np.zeros((8, 4)))
    assert len(seq) == 8
