"""Shared fixtures: a small rendered dataset and a briefly trained bundle.

The heavyweight acceptance artifacts (full 2500-clip dataset + 20k-step
checkpoint) are built once per machine or pointed at via DISMO_ACCEPT_DIR;
see tests/test_acceptance.py.
"""

from __future__ import annotations

import dataclasses

import pytest
import torch

from dismo import augment, datagen
from dismo.models import GeneratorConfig, MotionExtractorConfig
from dismo.training import TrainConfig, Trainer

TINY_RES = 32
TINY_T = 8


def tiny_extractor_config(**overrides) -> MotionExtractorConfig:
    base = dict(patch_size=8, frame_embed_depth=1, frame_embed_dim=64,
                sequence_depth=1, sequence_dim=64, motion_dim=8,
                num_frames=TINY_T, frame_size=TINY_RES, num_heads=2, spatial_pool=2)
    base.update(overrides)
    return MotionExtractorConfig(**base)


def tiny_generator_config(**overrides) -> GeneratorConfig:
    base = dict(depth=2, dim=64, patch_size=8, delta_max=4, frame_size=TINY_RES,
                num_heads=2, motion_dim=8, num_frames=TINY_T)
    base.update(overrides)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory) -> datagen.DatasetManifest:
    cfg = datagen.GenerationConfig(
        identities=datagen.default_identities(3, size_px=8),
        actions=datagen.default_actions(3),
        cameras=datagen.default_cameras(2),
        clips_per_cell=3, num_frames=TINY_T, resolution=TINY_RES,
        split_policy="by-action-holdout", holdout=2, seed=11)
    return datagen.generate_dataset(cfg, tmp_path_factory.mktemp("tinydata"))


@pytest.fixture(scope="session")
def tiny_bundle(tiny_manifest, tmp_path_factory):
    """A 30-iteration bundle: initialized-but-barely-trained weights."""
    tc = TrainConfig(batch_size=4, total_iters=30, warmup_iters=5, seed=3,
                     dataset=str(tiny_manifest.root), checkpoint_every=0)
    trainer = Trainer(tc, tiny_extractor_config(), tiny_generator_config(),
                      augment.AugmentationConfig.identity(),
                      out_dir=tmp_path_factory.mktemp("tinyrun"))
    trainer.attach_dataset(tiny_manifest)
    for _ in range(tc.total_iters):
        trainer.train_step()
    bundle = trainer.bundle()
    trainer.close()
    return bundle


@pytest.fixture()
def torch_rng():
    return torch.Generator().manual_seed(0)
