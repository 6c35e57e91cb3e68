import numpy as np
import pytest
import torch
from scipy import stats

from dismo import augment, datagen, training
from dismo.errors import ConfigurationError, TrainingDivergedError
from dismo.training import (
    CheckpointBundle,
    TrainConfig,
    Trainer,
    lr_at,
    run_training,
    sample_dropout_mask,
    sample_pair,
)

from conftest import tiny_extractor_config, tiny_generator_config


def _trainer(manifest, tmp_path, **kw):
    base = dict(batch_size=4, total_iters=10, warmup_iters=2, seed=7,
                dataset=str(manifest.root), checkpoint_every=0)
    base.update(kw)
    tc = TrainConfig(**base)
    tr = Trainer(tc, tiny_extractor_config(), tiny_generator_config(),
                 augment.AugmentationConfig.identity(), out_dir=tmp_path)
    tr.attach_dataset(manifest)
    return tr


def test_sample_pair_bounds():
    rng = torch.Generator().manual_seed(0)
    for _ in range(500):
        t, tp = sample_pair(8, 4, rng)
        assert 1 <= t < tp <= 8


def test_sample_pair_delta_one():
    rng = torch.Generator().manual_seed(1)
    assert all(tp - t == 1 for t, tp in (sample_pair(8, 1, rng) for _ in range(100)))


def test_sample_pair_delta_uniform_chi_squared():
    rng = torch.Generator().manual_seed(3)
    deltas = [tp - t for t, tp in (sample_pair(8, 4, rng) for _ in range(10_000))]
    counts = np.bincount(deltas, minlength=5)[1:]
    # exact multinomial null: uniform over {1..4}
    _, p = stats.chisquare(counts, f_exp=np.full(4, len(deltas) / 4))
    assert p > 0.01


def test_sample_pair_preconditions():
    rng = torch.Generator().manual_seed(0)
    with pytest.raises(ConfigurationError):
        sample_pair(1, 1, rng)
    with pytest.raises(ConfigurationError):
        sample_pair(8, 8, rng)


def test_loss_finite_and_nonnegative(tiny_manifest, tmp_path):
    tr = _trainer(tiny_manifest, tmp_path)
    loss = tr.train_step()
    assert np.isfinite(loss) and loss >= 0.0
    tr.close()


def test_identical_seeds_identical_loss_sequences(tiny_manifest, tmp_path):
    a = _trainer(tiny_manifest, tmp_path / "a")
    b = _trainer(tiny_manifest, tmp_path / "b")
    la = [a.train_step() for _ in range(5)]
    lb = [b.train_step() for _ in range(5)]
    assert la == lb
    a.close()
    b.close()


def test_both_parameter_sets_update(tiny_manifest, tmp_path):
    tr = _trainer(tiny_manifest, tmp_path, warmup_iters=0)
    ext_before = torch.cat([p.detach().flatten().clone() for p in tr.extractor.parameters()])
    gen_before = torch.cat([p.detach().flatten().clone() for p in tr.generator.parameters()])
    tr.train_step()
    ext_after = torch.cat([p.detach().flatten() for p in tr.extractor.parameters()])
    gen_after = torch.cat([p.detach().flatten() for p in tr.generator.parameters()])
    assert (ext_after - ext_before).norm() > 0
    assert (gen_after - gen_before).norm() > 0
    tr.close()


def test_dropout_rate_within_two_percent():
    rng = torch.Generator().manual_seed(11)
    for rate in (0.1, 0.25):
        mask = sample_dropout_mask(10_000, rate, rng)
        assert abs(mask.float().mean().item() - rate) <= 0.02


def test_lr_schedule_endpoints():
    tc = TrainConfig(warmup_iters=1000, lr=1e-4)
    assert lr_at(tc, 0) == 0.0
    assert lr_at(tc, 500) == pytest.approx(5e-5)
    assert lr_at(tc, 1000) == pytest.approx(1e-4)
    assert lr_at(tc, 5000) == pytest.approx(1e-4)


def test_checkpoint_roundtrip_bitwise(tiny_manifest, tmp_path):
    tr = _trainer(tiny_manifest, tmp_path)
    for _ in range(3):
        tr.train_step()
    bundle = tr.bundle()
    bundle.save(tmp_path / "ck.pt")
    loaded = CheckpointBundle.load(tmp_path / "ck.pt")
    for key, val in bundle.extractor_state.items():
        assert torch.equal(val, loaded.extractor_state[key])
    for key, val in bundle.generator_state.items():
        assert torch.equal(val, loaded.generator_state[key])
    assert torch.equal(bundle.rng_state, loaded.rng_state)
    assert loaded.loss_history == bundle.loss_history
    tr.close()


def test_resume_reproduces_next_step_exactly(tiny_manifest, tmp_path):
    a = _trainer(tiny_manifest, tmp_path / "a")
    for _ in range(4):
        a.train_step()
    bundle = a.bundle()
    next_loss = a.train_step()
    b = _trainer(tiny_manifest, tmp_path / "b")
    b.restore(bundle)
    assert b.train_step() == next_loss
    a.close()
    b.close()


def test_interrupted_run_matches_uninterrupted(tiny_manifest, tmp_path):
    full = run_training(TrainConfig(batch_size=4, total_iters=6, warmup_iters=2, seed=5,
                                    dataset=str(tiny_manifest.root), checkpoint_every=3),
                        tiny_extractor_config(), tiny_generator_config(),
                        augment.AugmentationConfig.identity(), out_dir=tmp_path / "full")
    part = run_training(TrainConfig(batch_size=4, total_iters=3, warmup_iters=2, seed=5,
                                    dataset=str(tiny_manifest.root), checkpoint_every=3),
                        tiny_extractor_config(), tiny_generator_config(),
                        augment.AugmentationConfig.identity(), out_dir=tmp_path / "part")
    resumed = run_training(TrainConfig(batch_size=4, total_iters=6, warmup_iters=2, seed=5,
                                       dataset=str(tiny_manifest.root), checkpoint_every=3),
                           tiny_extractor_config(), tiny_generator_config(),
                           augment.AugmentationConfig.identity(),
                           out_dir=tmp_path / "resumed",
                           resume=tmp_path / "part" / "checkpoint.pt")
    assert resumed.loss_history == full.loss_history


def test_nan_loss_aborts_with_dump(tiny_manifest, tmp_path, monkeypatch):
    tr = _trainer(tiny_manifest, tmp_path)
    monkeypatch.setattr(training, "fm_loss",
                        lambda gen, batch: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDivergedError):
        tr.train_step()
    assert (tmp_path / "diagnostic_dump.json").exists()
    tr.close()


def test_loss_log_records(tiny_manifest, tmp_path):
    import json
    run_training(TrainConfig(batch_size=4, total_iters=4, warmup_iters=1, seed=2,
                             dataset=str(tiny_manifest.root), checkpoint_every=0),
                 tiny_extractor_config(), tiny_generator_config(),
                 augment.AugmentationConfig.identity(), out_dir=tmp_path)
    lines = (tmp_path / "loss_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert {"iter", "loss", "lr", "wall_time"} <= set(rec)


def test_missing_dataset_rejected(tmp_path):
    with pytest.raises(Exception):
        run_training(TrainConfig(dataset=str(tmp_path / "nope")), out_dir=tmp_path)


def test_invalid_train_config():
    with pytest.raises(ConfigurationError, match="warmup"):
        TrainConfig(total_iters=10, warmup_iters=20)
    with pytest.raises(ConfigurationError, match="lr"):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError, match="precision"):
        TrainConfig(precision="float16")


@pytest.mark.slow
def test_toy_training_loss_drops(tmp_path):
    """500 steps on a 2x2 toy set: final-50 mean under 60% of first-50 mean."""
    cfg = datagen.GenerationConfig(
        identities=datagen.default_identities(2, size_px=8),
        actions=datagen.default_actions(2),
        cameras=datagen.default_cameras(1),
        clips_per_cell=10, num_frames=8, resolution=32, seed=21)
    manifest = datagen.generate_dataset(cfg, tmp_path / "toy")
    tc = TrainConfig(batch_size=8, total_iters=500, warmup_iters=50, seed=0,
                     dataset=str(manifest.root), checkpoint_every=0)
    trainer = Trainer(tc, tiny_extractor_config(motion_dim=8),
                      tiny_generator_config(motion_dim=8),
                      augment.AugmentationConfig(angle=(-10.0, 10.0), shear=(0.0, 0.0),
                                                 hflip=False),
                      out_dir=tmp_path / "run")
    trainer.attach_dataset(manifest)
    losses = [trainer.train_step() for _ in range(500)]
    trainer.close()
    assert np.isfinite(losses).all()
    assert np.mean(losses[-50:]) <= 0.6 * np.mean(losses[:50])
