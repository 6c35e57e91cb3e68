import numpy as np
import pytest
import torch

from dismo.errors import ConfigurationError
from dismo.models import (
    FlowSample,
    FrameGenerator,
    GeneratorConditioning,
    euler_integrate,
    fm_loss,
    interpolate,
    target_field,
)

from conftest import tiny_generator_config


def _cond(b=2, res=32, dm=8, delta=1):
    return GeneratorConditioning(source_frame=torch.rand(b, 3, res, res),
                                 motion=torch.randn(b, dm),
                                 delta=torch.full((b,), delta, dtype=torch.long))


def test_interpolate_endpoints_and_midpoint():
    z0 = torch.tensor([0.0, 0.0])
    z1 = torch.tensor([2.0, 4.0])
    assert torch.equal(interpolate(z0, z1, 0.0), z0)
    assert torch.equal(interpolate(z0, z1, 1.0), z1)
    assert torch.equal(interpolate(z0, z1, 0.5), torch.tensor([1.0, 2.0]))


def test_target_field_examples():
    z0 = torch.tensor([0.0, 0.0])
    z1 = torch.tensor([2.0, 4.0])
    assert torch.equal(target_field(z0, z0), torch.zeros(2))
    assert torch.equal(target_field(z0, z1), torch.tensor([2.0, 4.0]))
    assert torch.equal(target_field(z1, z0), -target_field(z0, z1))


def test_interpolation_identities_property():
    rng = np.random.default_rng(42)
    for _ in range(200):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        z0 = torch.from_numpy(rng.standard_normal(shape))
        z1 = torch.from_numpy(rng.standard_normal(shape))
        tau = float(rng.random())
        z_tau = interpolate(z0, z1, tau)
        ref = tau * z1 + (1 - tau) * z0
        denom = ref.abs().max().clamp(min=1e-12)
        assert ((z_tau - ref).abs().max() / denom) <= 1e-6
        assert torch.equal(target_field(z0, z1), z1 - z0)


def test_shape_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        interpolate(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(ConfigurationError):
        target_field(torch.zeros(2), torch.zeros(3))


def test_predict_velocity_shape_and_determinism():
    gen = FrameGenerator(tiny_generator_config()).eval()
    cond = _cond()
    z = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        a = gen.predict_velocity(z, 0.3, cond)
        b = gen.predict_velocity(z, 0.3, cond)
    assert a.shape == z.shape
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


def test_predict_velocity_responds_to_motion():
    torch.manual_seed(0)
    gen = FrameGenerator(tiny_generator_config()).eval()
    cond = _cond()
    z = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        a = gen.predict_velocity(z, 0.3, cond)
        cond2 = GeneratorConditioning(source_frame=cond.source_frame,
                                      motion=cond.motion + 1.0, delta=cond.delta)
        b = gen.predict_velocity(z, 0.3, cond2)
    assert (a - b).norm() > 0


def test_invalid_delta_rejected():
    gen = FrameGenerator(tiny_generator_config()).eval()
    cond = _cond(delta=1)
    cond.delta = torch.tensor([0, 9])
    with pytest.raises(ConfigurationError, match="delta"):
        gen.predict_velocity(torch.rand(2, 3, 32, 32), 0.5, cond)


def test_fm_loss_zero_when_prediction_matches_target():
    gen = FrameGenerator(tiny_generator_config())
    cond = _cond()
    sample = FlowSample.build(torch.randn(2, 3, 32, 32), torch.rand(2, 3, 32, 32),
                              torch.rand(2), cond)
    gen.predict_velocity = lambda z, tau, c: sample.u
    assert fm_loss(gen, sample).item() == 0.0


def test_fm_loss_nonnegative_and_self_consistent():
    torch.manual_seed(0)
    gen = FrameGenerator(tiny_generator_config())
    cond = _cond()
    sample = FlowSample.build(torch.randn(2, 3, 32, 32), torch.rand(2, 3, 32, 32),
                              torch.rand(2), cond)
    assert fm_loss(gen, sample).item() >= 0.0
    # substituting the model's own detached output as the target zeroes the loss
    with torch.no_grad():
        own = gen.predict_velocity(sample.z_tau, sample.tau, cond)
    sample_self = FlowSample(z0=sample.z0, z1=sample.z1, tau=sample.tau,
                             z_tau=sample.z_tau, u=own.detach(), cond=cond)
    assert fm_loss(gen, sample_self).item() == 0.0


def test_fm_loss_empty_batch_rejected():
    gen = FrameGenerator(tiny_generator_config())
    cond = GeneratorConditioning(source_frame=torch.zeros(0, 3, 32, 32),
                                 motion=torch.zeros(0, 8),
                                 delta=torch.zeros(0, dtype=torch.long))
    sample = FlowSample.build(torch.zeros(0, 3, 32, 32), torch.zeros(0, 3, 32, 32),
                              torch.zeros(0), cond)
    with pytest.raises(ConfigurationError):
        fm_loss(gen, sample)


def test_gradients_reach_extractor_through_motion():
    from dismo.models import MotionExtractor
    from conftest import tiny_extractor_config
    torch.manual_seed(0)
    ext = MotionExtractor(tiny_extractor_config())
    gen = FrameGenerator(tiny_generator_config())
    clip = torch.rand(2, 8, 3, 32, 32)
    m = ext(clip)
    cond = GeneratorConditioning(source_frame=clip[:, 0], motion=m[:, 0],
                                 delta=torch.ones(2, dtype=torch.long))
    loss = fm_loss(gen, FlowSample.build(torch.randn(2, 3, 32, 32), clip[:, 1],
                                         torch.rand(2), cond))
    loss.backward()
    some = ext.patch_embed.weight.grad
    assert some is not None and some.abs().max() > 0


def test_euler_constant_field_exact():
    z0 = torch.randn(2, 3, 4, 4)
    c = torch.randn(2, 3, 4, 4)
    for steps in (1, 3, 10):
        out = euler_integrate(lambda z, tau: c, z0, steps)
        assert torch.allclose(out, z0 + c, atol=1e-6)


def test_euler_linear_in_tau_error_halves():
    z0 = torch.zeros(1)
    a = torch.tensor([2.0])
    errors = {}
    for steps in (10, 20, 40, 80):
        out = euler_integrate(lambda z, tau: a * tau, z0, steps)
        errors[steps] = float((out - a / 2).abs())
    for steps in (10, 20, 40):
        ratio = errors[steps * 2] / errors[steps]
        assert 0.4 <= ratio <= 0.6


def test_euler_zero_steps_rejected():
    with pytest.raises(ConfigurationError):
        euler_integrate(lambda z, tau: z, torch.zeros(1), 0)


def test_sample_seeded_determinism_and_range():
    gen = FrameGenerator(tiny_generator_config()).eval()
    x = torch.rand(3, 32, 32)
    m = torch.randn(8)
    a = gen.sample(x, m, delta=1, steps=4, rng=torch.Generator().manual_seed(9))
    b = gen.sample(x, m, delta=1, steps=4, rng=torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    with pytest.raises(ConfigurationError):
        gen.sample(x, m, delta=1, steps=0, rng=torch.Generator())


def test_conditioning_dropout_uses_learned_nulls():
    torch.manual_seed(0)
    gen = FrameGenerator(tiny_generator_config()).eval()
    cond = _cond(b=1)
    z = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        base = gen.predict_velocity(z, 0.5, cond)
        cond.drop_motion = torch.tensor([True])
        dropped = gen.predict_velocity(z, 0.5, cond)
        # dropping must equal substituting the learned null embedding
        cond.drop_motion = None
        cond.motion = gen.null_motion[None, :].clone()
        substituted = gen.predict_velocity(z, 0.5, cond)
    assert (base - dropped).norm() > 0
    assert torch.allclose(dropped, substituted, atol=1e-6)
